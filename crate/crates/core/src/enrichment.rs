//! Pseudo-item synthesis and the augmented matrix `[X | X']`.

use std::cmp::Ordering;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::InteractionMatrix;
use crate::injection_diffusion::{sample_latents, InjectionDiffusion};
use crate::injection_vae::{InjectionDecoder, NodeClass};
use crate::nn::{sigmoid, Mat};
use crate::{Error, Result};

/// Decoded pseudo-items. `scores` and `logits` are users x new items.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedItems {
    pub features: Mat,
    pub scores: Mat,
    pub logits: Mat,
}

impl GeneratedItems {
    pub fn n_items(&self) -> usize {
        self.scores.ncols()
    }

    pub fn n_users(&self) -> usize {
        self.scores.nrows()
    }
}

/// Samples `n_new` item latents from the diffusion model and decodes them.
pub fn generate_items(
    decoder: &InjectionDecoder,
    diffusion: &InjectionDiffusion,
    n_new: usize,
    seed: u64,
) -> Result<GeneratedItems> {
    let latents = sample_latents(diffusion, n_new, NodeClass::Item, seed)?;
    let pass = decoder.forward(&latents)?;
    let logits = pass.logits.t().to_owned();
    Ok(GeneratedItems {
        features: pass.features,
        scores: sigmoid(&logits),
        logits,
    })
}

/// Scale on which the confidence threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauScale {
    Logit,
    Prob,
}

impl FromStr for TauScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Self::Logit),
            "prob" => Ok(Self::Prob),
            other => Err(Error::Config(format!("unknown tau scale `{other}` (logit|prob)"))),
        }
    }
}

impl std::fmt::Display for TauScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Logit => "logit",
            Self::Prob => "prob",
        })
    }
}

/// Keeps pairs whose confidence clears `tau`, then the `budget` highest
/// scores. Equal scores are ordered by (user, item) ascending.
pub fn select_edges(items: &GeneratedItems, tau: f64, scale: TauScale, budget: usize) -> Vec<(usize, usize)> {
    if budget == 0 {
        return Vec::new();
    }
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for ((u, j), &logit) in items.logits.indexed_iter() {
        let score = items.scores[[u, j]];
        let keep = match scale {
            TauScale::Logit => logit >= tau,
            TauScale::Prob => score >= tau,
        };
        if keep {
            cands.push((score, u, j));
        }
    }
    let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    };
    if cands.len() > budget {
        cands.select_nth_unstable_by(budget - 1, order);
        cands.truncate(budget);
    }
    cands.sort_unstable_by(order);
    cands.into_iter().map(|(_, u, j)| (u, j)).collect()
}

/// Base matrix plus injected (user, new item) edges.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMatrix {
    pub base: InteractionMatrix,
    pub injected_edges: Vec<(usize, usize)>,
    pub n_new_items: usize,
}

impl AugmentedMatrix {
    /// `M x (N + N')` matrix whose first N columns are `base` and whose
    /// base-item marker is N.
    pub fn assembled(&self) -> InteractionMatrix {
        let n = self.base.n_items();
        let mut rows: Vec<Vec<usize>> = self.base.rows().to_vec();
        for &(u, j) in &self.injected_edges {
            rows[u].push(n + j);
        }
        InteractionMatrix::from_rows(n + self.n_new_items, rows)
            .and_then(|m| m.with_base_items(n))
            .expect("edges validated at construction")
    }

    /// Splits an assembled matrix back into base and injected parts.
    pub fn from_assembled(x: &InteractionMatrix) -> Result<Self> {
        let n = x.n_base_items();
        let mut base_rows = Vec::with_capacity(x.n_users());
        let mut edges = Vec::new();
        for (u, row) in x.rows().iter().enumerate() {
            base_rows.push(row.iter().copied().filter(|&i| i < n).collect());
            edges.extend(row.iter().filter(|&&i| i >= n).map(|&i| (u, i - n)));
        }
        Ok(Self {
            base: InteractionMatrix::from_rows(n, base_rows)?,
            injected_edges: edges,
            n_new_items: x.n_items() - n,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.assembled().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_assembled(&InteractionMatrix::load(path)?)
    }
}

/// Appends `n_new` empty columns to `x` and sets the given edges in them.
pub fn augment(x: &InteractionMatrix, edges: &[(usize, usize)], n_new: usize) -> Result<AugmentedMatrix> {
    if let Some(&(u, j)) = edges.iter().find(|&&(u, j)| u >= x.n_users() || j >= n_new) {
        return Err(Error::OutOfRange(format!(
            "edge ({u}, {j}) outside {} users x {n_new} new items",
            x.n_users()
        )));
    }
    let mut injected = edges.to_vec();
    injected.sort_unstable();
    injected.dedup();
    Ok(AugmentedMatrix {
        base: x.clone(),
        injected_edges: injected,
        n_new_items: n_new,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnrichConfig {
    pub n_new: usize,
    pub tau: f64,
    pub tau_scale: TauScale,
    pub budget: usize,
    pub seed: u64,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            n_new: 2000,
            tau: 1.0,
            tau_scale: TauScale::Logit,
            budget: 2000,
            seed: 0,
        }
    }
}

/// Generation, selection and augmentation in one call.
pub fn enrich(
    x: &InteractionMatrix,
    decoder: &InjectionDecoder,
    diffusion: &InjectionDiffusion,
    cfg: &EnrichConfig,
) -> Result<(GeneratedItems, AugmentedMatrix)> {
    if decoder.n_users() != x.n_users() {
        return Err(Error::Shape(format!(
            "decoder scores {} users, matrix has {}",
            decoder.n_users(),
            x.n_users()
        )));
    }
    let items = generate_items(decoder, diffusion, cfg.n_new, cfg.seed)?;
    let edges = select_edges(&items, cfg.tau, cfg.tau_scale, cfg.budget);
    let aug = augment(x, &edges, cfg.n_new)?;
    Ok((items, aug))
}
