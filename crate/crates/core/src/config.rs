//! Flat `key = value` run configuration and hyperparameter search grids.
//!
//! Keys are namespaced by stage (`embed.*`, `inj.*`, `injdiff.*`,
//! `enrich.*`, `pref.*`, `latdiff.*`, `denoise.*`, `als.*`, ...). A
//! `profile = desk|long` line selects the base values every other key
//! overrides; `search.<key> = ...` lines declare search axes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::LogFormat;
use crate::enrichment::{EnrichConfig, TauScale};
use crate::graph_embed::EmbedConfig;
use crate::injection_diffusion::DiffusionConfig;
use crate::injection_vae::InjectionConfig;
use crate::metrics::{Conventions, IdealDcg, RecallDenominator};
use crate::preference_denoiser::{DenoiseConfig, DenoiseMode, LatentDiffConfig, PrefVaeConfig, ScoreLoss};
use crate::recommenders::{Algo, RecConfig};
use crate::{Error, Result};

/// Which augmentation stages run before the recommender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Graph generation followed by structural denoising.
    Full,
    /// Structural denoising of the original matrix only.
    NoGg,
    /// The augmented matrix without denoising.
    NoSd,
    /// The bare recommender.
    None,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::Full, Ablation::NoGg, Ablation::NoSd];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGg => "no_gg",
            Ablation::NoSd => "no_sd",
            Ablation::None => "none",
        }
    }

    pub fn uses_gg(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoSd)
    }

    pub fn uses_sd(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoGg)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (full|no_gg|no_sd|none)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub path: PathBuf,
    pub format: LogFormat,
    /// Uniformly subsample to this many interactions; 0 keeps everything.
    pub drop_to: usize,
    pub drop_seed: u64,
    pub holdout: f64,
    pub min_train: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/ml-100k.tsv"),
            format: LogFormat::Triples,
            drop_to: 20_312,
            drop_seed: 0,
            holdout: 0.2,
            min_train: 1,
            split_seed: 0,
        }
    }
}

/// Everything one `run-all` needs. Stage `seed` fields are overwritten by
/// each entry of `seeds` at run time and are not configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub name: String,
    pub data: DataConfig,
    pub embed: EmbedConfig,
    pub inj: InjectionConfig,
    pub injdiff: DiffusionConfig,
    pub enrich: EnrichConfig,
    pub pref: PrefVaeConfig,
    pub latdiff: LatentDiffConfig,
    pub denoise: DenoiseConfig,
    pub rec: RecConfig,
    pub algos: Vec<Algo>,
    pub cutoffs: Vec<usize>,
    pub conventions: Conventions,
    pub seeds: Vec<u64>,
    pub ablations: Vec<Ablation>,
    pub search: SearchSpace,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "ml100k".into(),
            data: DataConfig::default(),
            embed: EmbedConfig::default(),
            inj: InjectionConfig::default(),
            injdiff: DiffusionConfig::default(),
            enrich: EnrichConfig::default(),
            pref: PrefVaeConfig::default(),
            latdiff: LatentDiffConfig::default(),
            denoise: DenoiseConfig::default(),
            rec: RecConfig::default(),
            algos: vec![Algo::Als],
            cutoffs: vec![5, 10, 20, 50],
            conventions: Conventions::default(),
            seeds: vec![0, 1, 2],
            ablations: vec![Ablation::None, Ablation::Full],
            search: SearchSpace::default(),
        }
    }
}

impl PipelineConfig {
    /// Reduced training budgets that finish on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.embed.epochs = 30;
        cfg.inj.epochs = 600;
        // a short run needs a faster rate; the KL term collapses the
        // posterior at this budget and the feature term crowds out the map
        cfg.inj.lr = 1e-2;
        cfg.inj.beta_kl = 0.0;
        cfg.inj.lambda_feat = 0.1;
        cfg.injdiff.epochs = 100;
        cfg.pref.epochs = 30;
        cfg.latdiff.epochs = 50;
        cfg
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "long" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown profile `{other}` (desk|long)"))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Parses config text. Later lines override earlier ones; the profile
    /// line is applied first wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let profile = pairs.iter().rev().find(|(_, k, _)| k == "profile");
        let mut cfg = match profile {
            Some((_, _, v)) => Self::profile(v)?,
            None => Self::default(),
        };
        for (n, k, v) in &pairs {
            if k == "profile" {
                continue;
            }
            let res = match k.strip_prefix("search.") {
                Some(axis) => cfg.search.set_axis(axis, v),
                None => cfg.set(k, v),
            };
            res.map_err(|e| Error::Config(format!("line {n}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_field(self, key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    /// Current value of a key in config syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        field_entries(self).into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Config("metrics.cutoffs must be positive and non-empty".into()));
        }
        if self.algos.is_empty() || self.ablations.is_empty() {
            return Err(Error::Config("rec.algos and run.ablations must not be empty".into()));
        }
        if !(self.data.holdout > 0.0 && self.data.holdout < 1.0) {
            return Err(Error::Config(format!("split.holdout {} not in (0, 1)", self.data.holdout)));
        }
        for axis in &self.search.axes {
            for v in &axis.values {
                check_grid_member(&axis.key, v)?;
            }
        }
        Ok(())
    }

    pub fn max_cutoff(&self) -> usize {
        self.cutoffs.iter().copied().max().unwrap_or(0)
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in field_entries(self) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for axis in &self.search.axes {
            out.push_str(&format!("search.{} = {}\n", axis.key, axis.values.join(",")));
        }
        out
    }
}

/// One value type in config syntax.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| Error::Config(format!("bad value `{s}`: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool, String, LogFormat, TauScale, DenoiseMode, ScoreLoss, Algo, Ablation, RecallDenominator, IdealDcg);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self> {
        Ok(PathBuf::from(s))
    }

    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(T::parse_value).collect()
    }

    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! fields {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        fn set_field(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<bool> {
            match key {
                $($key => {
                    cfg.$($field).+ = ConfigValue::parse_value(value)
                        .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    Ok(true)
                })*
                _ => Ok(false),
            }
        }

        fn field_entries(cfg: &PipelineConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, cfg.$($field).+.render())),*]
        }
    };
}

fields! {
    "run.name" => name,
    "run.seeds" => seeds,
    "run.ablations" => ablations,
    "data.path" => data.path,
    "data.format" => data.format,
    "data.drop_to" => data.drop_to,
    "data.drop_seed" => data.drop_seed,
    "split.holdout" => data.holdout,
    "split.min_train" => data.min_train,
    "split.seed" => data.split_seed,
    "embed.dim" => embed.dim,
    "embed.layers" => embed.layers,
    "embed.epochs" => embed.epochs,
    "embed.lr" => embed.lr,
    "embed.reg" => embed.reg,
    "embed.batch" => embed.batch,
    "inj.hidden" => inj.hidden,
    "inj.joint" => inj.joint,
    "inj.dz" => inj.latent,
    "inj.decoder_hidden" => inj.decoder_hidden,
    "inj.feature_split" => inj.feature_split,
    "inj.map_split" => inj.map_split,
    "inj.layers" => inj.layers,
    "inj.lr" => inj.lr,
    "inj.epochs" => inj.epochs,
    "inj.lambda_feat" => inj.lambda_feat,
    "inj.lambda_map" => inj.lambda_map,
    "inj.beta_kl" => inj.beta_kl,
    "inj.learned_positional" => inj.learned_positional,
    "injdiff.T" => injdiff.steps,
    "injdiff.beta_start" => injdiff.beta_start,
    "injdiff.beta_end" => injdiff.beta_end,
    "injdiff.lr" => injdiff.lr,
    "injdiff.epochs" => injdiff.epochs,
    "injdiff.batch" => injdiff.batch,
    "injdiff.hidden" => injdiff.hidden,
    "injdiff.blocks" => injdiff.blocks,
    "injdiff.time_dim" => injdiff.time_dim,
    "injdiff.class_dim" => injdiff.class_dim,
    "injdiff.standardize" => injdiff.standardize,
    "enrich.n_new" => enrich.n_new,
    "enrich.tau" => enrich.tau,
    "enrich.tau_scale" => enrich.tau_scale,
    "enrich.budget" => enrich.budget,
    "pref.latent" => pref.latent,
    "pref.hidden" => pref.hidden,
    "pref.lr" => pref.lr,
    "pref.epochs" => pref.epochs,
    "pref.batch" => pref.batch,
    "latdiff.T" => latdiff.steps,
    "latdiff.beta_start" => latdiff.beta_start,
    "latdiff.beta_end" => latdiff.beta_end,
    "latdiff.lr" => latdiff.lr,
    "latdiff.epochs" => latdiff.epochs,
    "latdiff.batch" => latdiff.batch,
    "latdiff.hidden" => latdiff.hidden,
    "latdiff.blocks" => latdiff.blocks,
    "latdiff.time_dim" => latdiff.time_dim,
    "latdiff.mu_fd" => latdiff.mu_fd,
    "latdiff.loss" => latdiff.loss,
    "denoise.mode" => denoise.mode,
    "denoise.t_start" => denoise.t_start,
    "denoise.union" => denoise.union,
    "rec.algos" => algos,
    "als.factors" => rec.als.factors,
    "als.reg" => rec.als.reg,
    "als.alpha" => rec.als.alpha,
    "als.iters" => rec.als.iters,
    "svd.rank" => rec.svd_rank,
    "drmf.rank" => rec.drmf_rank,
    "hybrid.alpha" => rec.hybrid_alpha,
    "neumf.emb_dim" => rec.neumf.emb_dim,
    "neumf.layers" => rec.neumf.mlp_widths,
    "neumf.lr" => rec.neumf.lr,
    "neumf.epochs" => rec.neumf.epochs,
    "neumf.negatives" => rec.neumf.negatives,
    "neumf.batch" => rec.neumf.batch,
    "metrics.cutoffs" => cutoffs,
    "metrics.recall_denominator" => conventions.recall,
    "metrics.idcg" => conventions.idcg,
}

/// Allowed search range of a key: `lo, lo + step, ...` up to `hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRule {
    pub lo: f64,
    pub step: f64,
    pub hi: f64,
}

impl GridRule {
    pub fn contains(&self, v: f64) -> bool {
        let k = (v - self.lo) / self.step;
        v >= self.lo - 1e-12 * self.lo.abs() && v <= self.hi * (1.0 + 1e-12) && (k - k.round()).abs() < 1e-6
    }

    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.lo + k as f64 * self.step).collect()
    }
}

/// Search ranges of the tunable keys; other keys cannot be searched.
pub fn grid_rule(key: &str) -> Option<GridRule> {
    let rule = |lo, step, hi| Some(GridRule { lo, step, hi });
    match key {
        "latdiff.epochs" => rule(5.0, 5.0, 500.0),
        "latdiff.lr" => rule(1e-6, 1e-6, 1e-4),
        "denoise.t_start" => rule(3.0, 5.0, 200.0),
        "pref.latent" => rule(20.0, 10.0, 1000.0),
        "pref.lr" => rule(1e-4, 1e-4, 1e-2),
        "enrich.budget" => rule(500.0, 500.0, 1e9),
        _ => None,
    }
}

fn check_grid_member(key: &str, value: &str) -> Result<()> {
    let rule = grid_rule(key).ok_or_else(|| Error::Config(format!("`{key}` is not a searchable key")))?;
    let v: f64 = value
        .parse()
        .map_err(|_| Error::Config(format!("search.{key}: `{value}` is not numeric")))?;
    if rule.contains(v) {
        Ok(())
    } else {
        Err(Error::Config(format!("search.{key}: {value} is off the allowed grid")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Cross-product search space, one axis per searched key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub axes: Vec<SearchAxis>,
}

impl SearchSpace {
    /// Accepts `a,b,c` lists or `lo:step:hi` ranges. Re-declaring an axis
    /// replaces it.
    pub fn set_axis(&mut self, key: &str, spec: &str) -> Result<()> {
        let values: Vec<String> = match spec.split(':').collect::<Vec<_>>().as_slice() {
            [lo, step, hi] => {
                let p = |s: &str| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad range bound `{s}`")))
                };
                let rule = GridRule {
                    lo: p(lo)?,
                    step: p(step)?,
                    hi: p(hi)?,
                };
                if !(rule.step > 0.0) || rule.hi < rule.lo {
                    return Err(Error::Config(format!("empty range `{spec}`")));
                }
                let integral = grid_rule(key).is_some_and(|r| r.step.fract() == 0.0);
                rule.values()
                    .into_iter()
                    .map(|v| if integral { format!("{}", v.round() as u64) } else { format!("{v:e}") })
                    .collect()
            }
            _ => spec.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
        };
        if values.is_empty() {
            return Err(Error::Config(format!("search.{key} has no values")));
        }
        for v in &values {
            check_grid_member(key, v)?;
        }
        self.axes.retain(|a| a.key != key);
        self.axes.push(SearchAxis { key: key.to_string(), values });
        Ok(())
    }

    /// Number of grid points, saturating.
    pub fn size(&self) -> usize {
        self.axes.iter().fold(1usize, |acc, a| acc.saturating_mul(a.values.len()))
    }

    /// Decodes a mixed-radix index into one `(key, value)` assignment.
    pub fn point(&self, mut index: usize) -> Vec<(String, String)> {
        self.axes
            .iter()
            .map(|a| {
                let v = a.values[index % a.values.len()].clone();
                index /= a.values.len();
                (a.key.clone(), v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_profiles() {
        let text = "# comment\nals.factors = 16   # inline\nprofile = desk\nrun.seeds = 4, 5\nrec.algos = als,svd\nenrich.tau_scale = prob\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.rec.als.factors, 16);
        assert_eq!(cfg.inj.epochs, PipelineConfig::desk().inj.epochs);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.algos, vec![Algo::Als, Algo::PureSvd]);
        assert_eq!(cfg.enrich.tau_scale, TauScale::Prob);
        assert_eq!(cfg.get("als.factors").as_deref(), Some("16"));
    }

    #[test]
    fn text_form_round_trips() {
        let mut cfg = PipelineConfig::desk();
        cfg.latdiff.lr = 3e-6;
        cfg.inj.beta_kl = 0.1 + 0.2;
        cfg.ablations = Ablation::ALL.to_vec();
        cfg.search.set_axis("denoise.t_start", "3:5:23").unwrap();
        cfg.search.set_axis("latdiff.lr", "1e-6,2e-5").unwrap();
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(PipelineConfig::parse(&PipelineConfig::default().to_text()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("nope = 1", "line 1"),
            ("\nals.factors = x", "line 2"),
            ("run.seeds =", "run.seeds"),
            ("justtext", "line 1"),
            ("profile = huge", "profile"),
            ("search.als.factors = 1,2", "not a searchable key"),
            ("search.denoise.t_start = 4", "off the allowed grid"),
            ("search.latdiff.lr = 2e-4", "off the allowed grid"),
        ] {
            let err = PipelineConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn grid_rules_match_enumerated_ranges() {
        let t = grid_rule("denoise.t_start").unwrap().values();
        assert_eq!((t[0], t[1], *t.last().unwrap(), t.len()), (3.0, 8.0, 198.0, 40));
        let lr = grid_rule("latdiff.lr").unwrap();
        assert_eq!(lr.values().len(), 100);
        assert!(lr.contains(1e-4) && lr.contains(3.7e-5) && !lr.contains(1.5e-6));
        let latent = grid_rule("pref.latent").unwrap();
        assert!(latent.contains(200.0) && !latent.contains(205.0) && !latent.contains(1010.0));
        let budget = grid_rule("enrich.budget").unwrap();
        assert!(budget.contains(2000.0) && !budget.contains(2100.0) && !budget.contains(0.0));
    }

    #[test]
    fn search_space_decodes_every_point_once() {
        let mut s = SearchSpace::default();
        s.set_axis("pref.latent", "20,30,40").unwrap();
        s.set_axis("enrich.budget", "500:500:1000").unwrap();
        assert_eq!(s.size(), 6);
        let mut seen: Vec<_> = (0..6).map(|k| s.point(k)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        s.set_axis("pref.latent", "50").unwrap();
        assert_eq!(s.size(), 2);
    }

    #[test]
    fn ablation_algebra() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!(!Ablation::None.uses_gg() && !Ablation::None.uses_sd());
        assert!(Ablation::Full.uses_gg() && Ablation::Full.uses_sd());
        assert!(PipelineConfig::parse("run.seeds = ").is_err());
    }
}
