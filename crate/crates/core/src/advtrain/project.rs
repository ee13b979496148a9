//! Euclidean projections onto norm balls.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L1,
    L2,
}

impl Norm {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Nearest point to `delta` within the `norm` ball of radius `epsilon`.
/// Feasible inputs are returned unchanged.
pub fn project(delta: &[f64], norm: Norm, epsilon: f64) -> Vec<f64> {
    let eps = epsilon.max(0.0);
    if norm.norm(delta) <= eps {
        return delta.to_vec();
    }
    match norm {
        Norm::Linf => delta.iter().map(|d| d.clamp(-eps, eps)).collect(),
        Norm::L2 => {
            let s = eps / Norm::L2.norm(delta);
            delta.iter().map(|d| d * s).collect()
        }
        Norm::L1 => {
            let theta = l1_threshold(delta, eps);
            delta.iter().map(|d| d.signum() * (d.abs() - theta).max(0.0)).collect()
        }
    }
}

/// Soft-threshold level that maps `|delta|` onto the simplex of mass `eps`,
/// found from the magnitudes sorted in descending order.
fn l1_threshold(delta: &[f64], eps: f64) -> f64 {
    let mut u: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - eps) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}
