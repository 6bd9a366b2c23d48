use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nodediffrec::checkpoint::{load_matrix, save_matrix, save_scores_binary};
use nodediffrec::config::PipelineConfig;
use nodediffrec::dataset::{load_interactions, stats, InteractionMatrix, LogFormat};
use nodediffrec::enrichment::{enrich, AugmentedMatrix, EnrichConfig, TauScale};
use nodediffrec::graph_embed::{build_norm_adjacency, pretrain, EmbedConfig, NodeEmbeddings};
use nodediffrec::injection_diffusion::{train_diffusion, DiffusionConfig, InjectionDiffusion};
use nodediffrec::injection_vae::{encode, train_injection_vae, InjectionConfig, InjectionVae};
use nodediffrec::metrics::evaluate;
use nodediffrec::pipeline::{cache_dir, denoise_stage, hyperparam_search, run_pipeline};
use nodediffrec::preference_denoiser::DenoiseMode;
use nodediffrec::recommenders::{fit, recommend_topk, Algo};
use nodediffrec::report::{collect_reports, emit_report};

#[derive(Parser)]
#[command(name = "nodediff", version, about = "Diffusion-based augmentation of implicit-feedback data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an interaction log into the sparse coordinate format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "triples")]
        format: LogFormat,
        #[arg(long)]
        out: PathBuf,
        /// Subsample to this many interactions.
        #[arg(long)]
        drop_to: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the LightGCN embedder and write propagated embeddings.
    TrainEmbedder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the injection VAE and its latent DDPM into a model directory.
    TrainInjection {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate pseudo-items and write the augmented matrix.
    Inject {
        /// Directory written by `train-injection`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_new: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value = "logit")]
        tau_scale: TauScale,
        #[arg(long, default_value_t = 2000)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the preference models on a matrix and write the denoised one.
    Denoise {
        #[arg(long)]
        aug: PathBuf,
        #[arg(long, default_value = "partial")]
        mode: DenoiseMode,
        #[arg(long, default_value_t = 18)]
        t_start: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a recommender and write top-K lists, one `user<TAB>items` line each.
    Recommend {
        #[arg(long)]
        algo: Algo,
        #[arg(long)]
        data: PathBuf,
        /// Items never recommended; defaults to the base columns of `data`.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Held-out interactions; prints Recall/NDCG when given.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also export the dense score matrix.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured seed and ablation and write the report.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `$NODEDIFF_CACHE_DIR/<run.name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random search over the config's `search.*` axes.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 30)]
        budget: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary tables and plots over saved runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::from_file(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_any(path: &Path) -> Result<InteractionMatrix> {
    InteractionMatrix::load(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest {
            input,
            format,
            out,
            drop_to,
            seed,
        } => {
            let mut x = load_interactions(&input, format)?;
            if let Some(n) = drop_to {
                x = x.drop_to(n, seed)?;
            }
            x.save(&out)?;
            println!("{}", stats(&x));
        }
        Command::TrainEmbedder {
            data,
            dim,
            layers,
            epochs,
            lr,
            seed,
            out,
        } => {
            let x = load_any(&data)?;
            let cfg = EmbedConfig {
                dim,
                layers,
                epochs,
                lr,
                seed,
                ..EmbedConfig::default()
            };
            let pre = pretrain(&x, &cfg)?;
            let z = pre.propagated(&build_norm_adjacency(&x, false), layers);
            save_matrix(&out, &z.matrix)?;
            println!("final bpr loss {:.5}", pre.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainInjection {
            data,
            embeddings,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let x = load_any(&data)?;
            let z_in = NodeEmbeddings::new(x.n_users(), x.n_items(), load_matrix(&embeddings)?)?;
            let adj = build_norm_adjacency(&x, true);
            let vae = train_injection_vae(&z_in, &x, &adj, &InjectionConfig { seed, ..cfg.inj })?.vae;
            let codes = encode(&z_in, &adj, &vae.encoder, vae.layers)?;
            let diffusion = train_diffusion(&codes.mu, &vae.node_classes(), &DiffusionConfig { seed, ..cfg.injdiff })?;
            fs::create_dir_all(&out)?;
            vae.save(&out.join("injection_vae.ckpt"))?;
            diffusion.save(&out.join("injection_diffusion.ckpt"))?;
        }
        Command::Inject {
            model,
            data,
            n_new,
            tau,
            tau_scale,
            budget,
            seed,
            out,
        } => {
            let x = load_any(&data)?;
            let vae = InjectionVae::load(&model.join("injection_vae.ckpt"))?;
            let diffusion = InjectionDiffusion::load(&model.join("injection_diffusion.ckpt"))?;
            let cfg = EnrichConfig {
                n_new,
                tau,
                tau_scale,
                budget,
                seed,
            };
            let (_, aug) = enrich(&x, &vae.decoder, &diffusion, &cfg)?;
            aug.save(&out)?;
            println!("injected {} edges over {} items", aug.injected_edges.len(), aug.n_new_items);
        }
        Command::Denoise {
            aug,
            mode,
            t_start,
            config,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.denoise.mode = mode;
            cfg.denoise.t_start = t_start;
            let x = AugmentedMatrix::load(&aug)?.assembled();
            let outcome = denoise_stage(&x, &cfg, seed)?;
            outcome.matrix.save(&out)?;
            println!("{} entries ({} in input)", outcome.matrix.nnz(), x.nnz());
        }
        Command::Recommend {
            algo,
            data,
            train,
            test,
            k,
            config,
            seed,
            scores,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let x = load_any(&data)?;
            let exclude = match &train {
                Some(p) => load_any(p)?,
                None => base_columns(&x)?,
            };
            let model = fit(algo, &x, None, &cfg.rec, seed)?;
            if let Some(p) = &scores {
                save_scores_binary(p, &model.score_matrix())?;
            }
            let lists = recommend_topk(model.as_ref(), &exclude, k)?;
            let mut w = BufWriter::new(fs::File::create(&out)?);
            for (u, l) in lists.iter().enumerate() {
                let items: Vec<String> = l.items.iter().map(usize::to_string).collect();
                writeln!(w, "{u}\t{}", items.join(","))?;
            }
            w.flush()?;
            if let Some(p) = &test {
                let cutoffs: Vec<usize> = cfg.cutoffs.iter().copied().filter(|&c| c <= k).collect();
                for m in evaluate(&lists, &load_any(p)?, &cutoffs, cfg.conventions)? {
                    println!("@{}: recall {:.4} ndcg {:.4} ({} users)", m.cutoff, m.recall, m.ndcg, m.n_users);
                }
            }
        }
        Command::RunAll { config, out } => {
            let cfg = load_config(Some(&config))?;
            let out = out.unwrap_or_else(|| cache_dir().join(&cfg.name));
            let art = run_pipeline(&cfg, Some(&out))?;
            print!("{}", art.report.to_csv());
            println!("artifacts in {}", out.display());
        }
        Command::Search { config, budget, out } => {
            let cfg = load_config(Some(&config))?;
            if cfg.search.axes.is_empty() {
                bail!("{} declares no search.* axes", config.display());
            }
            let out = out.unwrap_or_else(|| cache_dir().join(format!("{}_search", cfg.name)));
            let res = hyperparam_search(&cfg, budget, Some(&out))?;
            println!("best validation recall@10 {:.5}", res.best_objective);
            println!("best config written to {}", out.join("best_config.txt").display());
        }
        Command::Report { runs, out } => {
            let reports = collect_reports(&runs)?;
            if reports.is_empty() {
                bail!("no report.json under {}", runs.display());
            }
            for f in emit_report(&reports, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

/// `x` restricted to its original columns.
fn base_columns(x: &InteractionMatrix) -> Result<InteractionMatrix> {
    let n = x.n_base_items();
    let rows = x.rows().iter().map(|r| r.iter().copied().filter(|&i| i < n).collect()).collect();
    Ok(InteractionMatrix::from_rows(n, rows)?)
}
