//! End-to-end runs: data preparation, the two augmentation stages, the
//! downstream recommenders, evaluation, persistence and random search.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, DataConfig, PipelineConfig, SearchSpace};
use crate::dataset::{load_interactions, split, InteractionMatrix, SplitSpec};
use crate::enrichment::{enrich, AugmentedMatrix, EnrichConfig};
use crate::graph_embed::{build_norm_adjacency, pretrain, EmbedConfig};
use crate::injection_diffusion::{train_diffusion, DiffusionConfig, InjectionDiffusion};
use crate::injection_vae::{encode, train_injection_vae, InjectionConfig, InjectionVae};
use crate::metrics::{evaluate, CutoffMetrics, EvalReport};
use crate::preference_denoiser::{
    structural_denoise, DenoiseConfig, LatentDiffConfig, PrefVaeConfig, PreferenceOutcome,
};
use crate::recommenders::{fit, recommend_topk, Algo};
use crate::{stream_rng, Error, Result};

/// Environment variable naming the artifact root.
pub const CACHE_ENV: &str = "NODEDIFF_CACHE_DIR";

/// Artifact root: `$NODEDIFF_CACHE_DIR`, else `runs/` in the working directory.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Train and test matrices of one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub full: InteractionMatrix,
    pub train: InteractionMatrix,
    pub test: InteractionMatrix,
}

pub fn prepare_data(cfg: &DataConfig) -> Result<Prepared> {
    let raw = load_interactions(&cfg.path, cfg.format)?;
    let full = if cfg.drop_to > 0 && cfg.drop_to < raw.nnz() {
        raw.drop_to(cfg.drop_to, cfg.drop_seed)?
    } else {
        raw
    };
    split_prepared(full, cfg)
}

pub fn split_prepared(full: InteractionMatrix, cfg: &DataConfig) -> Result<Prepared> {
    let spec = SplitSpec {
        holdout_fraction: cfg.holdout,
        seed: cfg.split_seed,
        min_train_per_user: cfg.min_train,
    };
    let (train, test) = split(&full, &spec)?;
    Ok(Prepared { full, train, test })
}

/// Wall-clock seconds of one stage of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub seed: u64,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Default)]
struct Clock(Vec<StageTiming>);

impl Clock {
    fn time<T>(&mut self, seed: u64, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("seed {seed}: {stage} took {seconds:.1}s");
        self.0.push(StageTiming {
            seed,
            stage: stage.into(),
            seconds,
        });
        Ok(out)
    }
}

/// Stage-one models and the augmented matrix they produce.
#[derive(Debug, Clone)]
pub struct GraphGeneration {
    pub vae: InjectionVae,
    pub diffusion: InjectionDiffusion,
    pub aug: AugmentedMatrix,
}

fn seeded<T>(base: &T, seed: u64, set: impl FnOnce(&mut T, u64)) -> T
where
    T: Clone,
{
    let mut c = base.clone();
    set(&mut c, seed);
    c
}

/// Embedder pretraining, injection VAE, latent DDPM and enrichment.
pub fn graph_generation(train: &InteractionMatrix, cfg: &PipelineConfig, seed: u64) -> Result<GraphGeneration> {
    graph_generation_timed(train, cfg, seed, &mut Clock::default())
}

fn graph_generation_timed(train: &InteractionMatrix, cfg: &PipelineConfig, seed: u64, clock: &mut Clock) -> Result<GraphGeneration> {
    let embed_cfg = seeded(&cfg.embed, seed, |c: &mut EmbedConfig, s| c.seed = s);
    let inj_cfg = seeded(&cfg.inj, seed, |c: &mut InjectionConfig, s| c.seed = s);
    let diff_cfg = seeded(&cfg.injdiff, seed, |c: &mut DiffusionConfig, s| c.seed = s);
    let enrich_cfg = seeded(&cfg.enrich, seed, |c: &mut EnrichConfig, s| c.seed = s);

    let pre = clock.time(seed, "graph_embed", || pretrain(train, &embed_cfg))?;
    let z_in = pre.propagated(&build_norm_adjacency(train, false), embed_cfg.layers);
    let adj = build_norm_adjacency(train, true);
    let vae = clock.time(seed, "injection_vae", || train_injection_vae(&z_in, train, &adj, &inj_cfg))?.vae;
    let diffusion = clock.time(seed, "injection_diffusion", || {
        let codes = encode(&z_in, &adj, &vae.encoder, vae.layers)?;
        train_diffusion(&codes.mu, &vae.node_classes(), &diff_cfg)
    })?;
    let (generated, aug) = clock.time(seed, "enrichment", || enrich(train, &vae.decoder, &diffusion, &enrich_cfg))?;
    let max_logit = generated.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log::info!(
        "seed {seed}: injected {} edges over {} new items (max logit {max_logit:.3})",
        aug.injected_edges.len(),
        aug.n_new_items
    );
    Ok(GraphGeneration { vae, diffusion, aug })
}

/// Preference VAE, latent diffusion and finalization of `x`.
pub fn denoise_stage(x: &InteractionMatrix, cfg: &PipelineConfig, seed: u64) -> Result<PreferenceOutcome> {
    let pref = seeded(&cfg.pref, seed, |c: &mut PrefVaeConfig, s| c.seed = s);
    let lat = seeded(&cfg.latdiff, seed, |c: &mut LatentDiffConfig, s| c.seed = s);
    let den = seeded(&cfg.denoise, seed, |c: &mut DenoiseConfig, s| c.seed = s);
    structural_denoise(x, &pref, &lat, &den)
}

/// Intermediate matrices and models of one seed.
#[derive(Debug, Clone, Default)]
pub struct SeedArtifact {
    pub seed: u64,
    pub generation: Option<GraphGeneration>,
    /// Denoised matrices keyed by the ablation that consumed them.
    pub optimized: BTreeMap<Ablation, PreferenceOutcome>,
    /// Metrics per (algorithm, ablation).
    pub metrics: BTreeMap<(Algo, Ablation), Vec<CutoffMetrics>>,
}

impl SeedArtifact {
    /// Matrix the recommenders of `ablation` train on.
    pub fn input(&self, ablation: Ablation, train: &InteractionMatrix) -> Result<InteractionMatrix> {
        let missing = || Error::InvalidArgument(format!("seed {} has no matrix for `{ablation}`", self.seed));
        Ok(match ablation {
            Ablation::None => train.clone(),
            Ablation::NoSd => self.generation.as_ref().ok_or_else(missing)?.aug.assembled(),
            Ablation::Full | Ablation::NoGg => self.optimized.get(&ablation).ok_or_else(missing)?.matrix.clone(),
        })
    }
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub config: PipelineConfig,
    pub report: EvalReport,
    pub seeds: Vec<SeedArtifact>,
    pub timings: Vec<StageTiming>,
}

/// Runs every configured seed, ablation and algorithm. When `out` is given,
/// each seed's artifacts are written as soon as they exist so a failing
/// stage leaves the earlier ones behind.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>) -> Result<RunArtifact> {
    cfg.validate()?;
    let data = prepare_data(&cfg.data).map_err(|e| e.in_stage("dataset"))?;
    run_on(&data, cfg, out)
}

/// [`run_pipeline`] on already prepared data.
pub fn run_on(data: &Prepared, cfg: &PipelineConfig, out: Option<&Path>) -> Result<RunArtifact> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        data.train.save(&dir.join("train.coo"))?;
        data.test.save(&dir.join("test.coo"))?;
    }
    let mut clock = Clock::default();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let art = run_seed(data, cfg, seed, &mut clock, out)?;
        seeds.push(art);
        if let Some(dir) = out {
            write_timings(dir, &clock.0)?;
        }
    }
    let mut report = EvalReport::default();
    for &algo in &cfg.algos {
        for &ab in &cfg.ablations {
            let per_seed: Vec<Vec<CutoffMetrics>> = seeds.iter().map(|s| s.metrics[&(algo, ab)].clone()).collect();
            report.push_seeds(algo.name(), ab.name(), &per_seed)?;
        }
    }
    let art = RunArtifact {
        config: cfg.clone(),
        report,
        seeds,
        timings: clock.0,
    };
    if let Some(dir) = out {
        art.save(dir)?;
    }
    Ok(art)
}

fn run_seed(data: &Prepared, cfg: &PipelineConfig, seed: u64, clock: &mut Clock, out: Option<&Path>) -> Result<SeedArtifact> {
    let mut art = SeedArtifact {
        seed,
        ..SeedArtifact::default()
    };
    let seed_dir = out.map(|d| d.join(format!("seed_{seed}")));
    if let Some(d) = &seed_dir {
        fs::create_dir_all(d)?;
    }
    if cfg.ablations.iter().any(|a| a.uses_gg()) {
        let gg = graph_generation_timed(&data.train, cfg, seed, clock)?;
        if let Some(d) = &seed_dir {
            gg.vae.save(&d.join("injection_vae.ckpt"))?;
            gg.diffusion.save(&d.join("injection_diffusion.ckpt"))?;
            gg.aug.save(&d.join("x_aug.coo"))?;
        }
        art.generation = Some(gg);
    }
    for &ab in cfg.ablations.iter().filter(|a| a.uses_sd()) {
        let input = match ab {
            Ablation::Full => art.input(Ablation::NoSd, &data.train)?,
            _ => data.train.clone(),
        };
        let outcome = clock.time(seed, "preference_denoiser", || denoise_stage(&input, cfg, seed))?;
        log::info!(
            "seed {seed}: {ab} denoised matrix has {} entries ({} in input)",
            outcome.matrix.nnz(),
            input.nnz()
        );
        if let Some(d) = &seed_dir {
            outcome.matrix.save(&d.join(format!("x_opt_{ab}.coo")))?;
            outcome
                .diffusion
                .model
                .save(&d.join(format!("preference_{ab}.ckpt")), &outcome.vae.vae)?;
        }
        art.optimized.insert(ab, outcome);
    }
    for &ab in &cfg.ablations {
        let input = art.input(ab, &data.train)?;
        for &algo in &cfg.algos {
            let metrics = clock.time(seed, "recommenders", || evaluate_matrix(&input, data, cfg, algo, seed))?;
            log::info!("seed {seed}: {algo}/{ab} recall = {:?}", metrics.iter().map(|m| m.recall).collect::<Vec<_>>());
            art.metrics.insert((algo, ab), metrics);
        }
    }
    Ok(art)
}

/// Fits `algo` on `input` and scores its top-K lists against the test split.
pub fn evaluate_matrix(
    input: &InteractionMatrix,
    data: &Prepared,
    cfg: &PipelineConfig,
    algo: Algo,
    seed: u64,
) -> Result<Vec<CutoffMetrics>> {
    let model = fit(algo, input, None, &cfg.rec, seed)?;
    let lists = recommend_topk(model.as_ref(), &data.train, cfg.max_cutoff())?;
    evaluate(&lists, &data.test, &cfg.cutoffs, cfg.conventions)
}

fn write_timings(dir: &Path, timings: &[StageTiming]) -> Result<()> {
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(timings)?)?;
    Ok(())
}

impl RunArtifact {
    /// Writes the config snapshot, report (JSON and CSV) and timings.
    /// Per-seed matrices and checkpoints are written during the run.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.config.to_text())?;
        fs::write(dir.join("report.json"), self.report.to_json())?;
        fs::write(dir.join("report.csv"), self.report.to_csv())?;
        write_timings(dir, &self.timings)
    }

    /// Reads back the config snapshot and report of a saved run.
    pub fn load_report(dir: &Path) -> Result<(PipelineConfig, EvalReport)> {
        let cfg = PipelineConfig::from_file(&dir.join("config.txt"))?;
        let report = EvalReport::from_json(&fs::read_to_string(dir.join("report.json"))?)?;
        Ok((cfg, report))
    }
}

/// One evaluated search point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub assignment: Vec<(String, String)>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: PipelineConfig,
    pub best_objective: f64,
    pub trace: Vec<Trial>,
}

/// Random search over `space`: `budget` distinct grid points drawn
/// uniformly (all of them when the grid is smaller), each scored by
/// `objective`. The first point with the highest score wins.
pub fn random_search(
    base: &PipelineConfig,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    mut objective: impl FnMut(&PipelineConfig) -> Result<f64>,
) -> Result<SearchOutcome> {
    if space.axes.is_empty() || space.size() == 0 {
        return Err(Error::InvalidArgument("search grid is empty".into()));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("search budget must be positive".into()));
    }
    let mut rng = stream_rng(seed, 0x5ea);
    let picks = index::sample(&mut rng, space.size(), budget.min(space.size())).into_vec();
    let mut trace = Vec::with_capacity(picks.len());
    let mut best: Option<(f64, PipelineConfig)> = None;
    for p in picks {
        let assignment = space.point(p);
        let mut cfg = base.clone();
        for (k, v) in &assignment {
            cfg.set(k, v)?;
        }
        let score = objective(&cfg)?;
        log::info!("trial {assignment:?}: {score:.5}");
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, cfg));
        }
        trace.push(Trial {
            assignment,
            objective: score,
        });
    }
    let (best_objective, mut best) = best.expect("budget is positive");
    best.search = SearchSpace::default();
    Ok(SearchOutcome {
        best,
        best_objective,
        trace,
    })
}

/// Cutoff whose recall the search maximizes.
pub const SEARCH_CUTOFF: usize = 10;

/// Validation Recall@10 of the first configured algorithm under the full
/// pipeline, on a 10% holdout carved from the training split.
pub fn validation_objective(data: &Prepared, cfg: &PipelineConfig) -> Result<f64> {
    let inner = split_prepared(
        data.train.clone(),
        &DataConfig {
            holdout: 0.1,
            split_seed: cfg.data.split_seed ^ 0x7a11d,
            ..cfg.data.clone()
        },
    )?;
    let seed = cfg.seeds[0];
    let algo = cfg.algos[0];
    let mut eval_cfg = cfg.clone();
    eval_cfg.cutoffs = vec![SEARCH_CUTOFF];
    let gg = graph_generation(&inner.train, &eval_cfg, seed)?;
    let sd = denoise_stage(&gg.aug.assembled(), &eval_cfg, seed)?;
    let m = evaluate_matrix(&sd.matrix, &inner, &eval_cfg, algo, seed)?;
    Ok(m[0].recall)
}

/// Searches the config's `search.*` axes and writes the trace.
pub fn hyperparam_search(cfg: &PipelineConfig, budget: usize, out: Option<&Path>) -> Result<SearchOutcome> {
    cfg.validate()?;
    let data = prepare_data(&cfg.data).map_err(|e| e.in_stage("dataset"))?;
    let outcome = random_search(cfg, &cfg.search, budget, cfg.seeds[0], |c| validation_objective(&data, c))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("search_trace.json"), serde_json::to_string_pretty(&outcome.trace)?)?;
        fs::write(dir.join("best_config.txt"), outcome.best.to_text())?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::grid_rule;

    fn space() -> SearchSpace {
        let mut s = SearchSpace::default();
        s.set_axis("denoise.t_start", "3:5:198").unwrap();
        s.set_axis("pref.lr", "1e-4,5e-4,1e-3").unwrap();
        s
    }

    #[test]
    fn budget_one_returns_the_single_point() {
        let out = random_search(&PipelineConfig::default(), &space(), 1, 0, |_| Ok(0.25)).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.best_objective, 0.25);
        let t = &out.trace[0].assignment;
        assert_eq!(out.best.get("denoise.t_start").unwrap(), t[0].1);
    }

    #[test]
    fn dominant_point_wins() {
        let mut s = SearchSpace::default();
        s.set_axis("pref.latent", "20,30").unwrap();
        let out = random_search(&PipelineConfig::default(), &s, 2, 3, |c| Ok(if c.pref.latent == 30 { 0.4 } else { 0.1 })).unwrap();
        assert_eq!(out.best.pref.latent, 30);
        assert_eq!(out.best_objective, 0.4);
        assert!(out.best.search.axes.is_empty());
    }

    #[test]
    fn trace_has_budget_distinct_grid_members() {
        let out = random_search(&PipelineConfig::default(), &space(), 30, 7, |c| Ok(c.denoise.t_start as f64)).unwrap();
        assert_eq!(out.trace.len(), 30);
        let mut seen: Vec<_> = out.trace.iter().map(|t| t.assignment.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 30);
        for t in &out.trace {
            for (k, v) in &t.assignment {
                assert!(grid_rule(k).unwrap().contains(v.parse().unwrap()), "{k}={v}");
            }
        }
        let again = random_search(&PipelineConfig::default(), &space(), 30, 7, |c| Ok(c.denoise.t_start as f64)).unwrap();
        assert_eq!(again.trace, out.trace);
        assert!(random_search(&PipelineConfig::default(), &SearchSpace::default(), 3, 0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn cache_dir_reads_the_environment() {
        // the variable is not set by the test harness
        if std::env::var_os(CACHE_ENV).is_none() {
            assert_eq!(cache_dir(), PathBuf::from("runs"));
        }
    }
}
