//! Command-line driver: data generation, lifelong training, evaluation,
//! ablation sweeps, storage accounting, and gradient checks.

use adl_core::adapters::{storage_bytes, AdapterSite, StorageConfig};
use adl_core::config::ExperimentConfig;
use adl_core::data::{generate_blended_domain, generate_domain, DomainDataset};
use adl_core::encoder::Encoder;
use adl_core::error::Error;
use adl_core::eval::{
    average_scores, forgetting_report, similarity_matrix, write_forgetting_csv, write_scores_csv,
    write_similarity_csv, RankScore, ScoreRow,
};
use adl_core::lifelong::{InferOptions, LifelongState, Routing};
use adl_core::rng::derive_seed;
use adl_core::training::{train_base, write_loss_csv};
use adl_core::Result;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "adl", version, about = "Lifelong low-rank adapters with distribution-distance routing")]
struct Cli {
    /// Cap the worker-thread count (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoutingArg {
    /// Statistics-based auto-selection.
    Auto,
    /// Force each seen domain onto its own adapter (exact one-hot).
    SelfHot,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateAxis {
    TemperatureFamily,
    ABGrid,
    RankAlpha,
    Sites,
    StatsSamples,
    FixedTemperature,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full lifelong sequence, evaluating after each step.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score seen (and optionally unseen) domains from a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated domain names (default: all trained domains).
        #[arg(long)]
        domains: Option<String>,
        /// Cap on test samples used for the statistics fit.
        #[arg(long)]
        stats_samples: Option<usize>,
        /// Also evaluate the held-out unseen domain.
        #[arg(long)]
        unseen: bool,
        #[arg(long, value_enum, default_value = "auto")]
        routing: RoutingArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Knowledge-similarity confusion matrix over the trained domains.
    Similarity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stats_samples: Option<usize>,
    },
    /// Sweep one configuration axis, training per variant.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblateAxis,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to reuse for eval-only axes (stats-samples).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-dataset storage accounting for a model shape.
    StorageReport {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        rank: usize,
        #[arg(long, default_value_t = 12)]
        blocks: usize,
        #[arg(long, default_value_t = 768)]
        d_model: usize,
        #[arg(long, default_value_t = 3072)]
        ffn_dim: usize,
        /// Comma-separated sites: q,k,v,proj,ffn
        #[arg(long, default_value = "q,k,v,proj")]
        sites: String,
        #[arg(long, default_value_t = 768)]
        stats_dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of every op, loss, and the composed
    /// encoder.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sequential full fine-tuning baseline (no adapters, no selector).
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Format(_) | Error::Json(_) => 4,
        Error::Protocol(_) => 5,
        Error::Data(_) => 6,
        Error::Dim(_)
        | Error::NotSymmetric(_)
        | Error::NoConvergence(_)
        | Error::NotPsd(_)
        | Error::NonFinite(_)
        | Error::InsufficientSamples(_) => 7,
        Error::Param(_)
        | Error::Index(_)
        | Error::Empty(_)
        | Error::Sampler(_)
        | Error::Label(_)
        | Error::State(_)
        | Error::UnsupportedOp(_) => 8,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => cmd_gen_data(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => cmd_train(&config, &data, &out, seed),
        Command::Eval {
            ckpt,
            data,
            out,
            domains,
            stats_samples,
            unseen,
            routing,
            seed,
        } => cmd_eval(
            &ckpt,
            &data,
            out.as_deref(),
            domains.as_deref(),
            stats_samples,
            unseen,
            routing,
            seed.unwrap_or(0),
        ),
        Command::Similarity {
            ckpt,
            data,
            out,
            stats_samples,
        } => cmd_similarity(&ckpt, &data, out.as_deref(), stats_samples),
        Command::Ablate {
            axis,
            config,
            data,
            out,
            ckpt,
            seed,
        } => cmd_ablate(axis, &config, &data, &out, ckpt.as_deref(), seed),
        Command::StorageReport {
            config,
            rank,
            blocks,
            d_model,
            ffn_dim,
            sites,
            stats_dim,
            out,
        } => cmd_storage_report(
            config.as_deref(),
            rank,
            blocks,
            d_model,
            ffn_dim,
            &sites,
            stats_dim,
            out.as_deref(),
        ),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Baseline {
            config,
            data,
            out,
            seed,
        } => cmd_baseline(&config, &data, &out, seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolved()
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;

    let mut offset = 0u32;
    let mut generated: Vec<DomainDataset> = Vec::new();
    let base = generate_domain(&cfg.data.base, offset)?;
    offset += base.unique_ids(None).len() as u32;
    println!("generated {:<10} {:>5} samples", base.name, base.len());
    generated.push(base);

    for spec in &cfg.data.domains {
        let ds = generate_domain(spec, offset)?;
        offset += ds.unique_ids(None).len() as u32;
        println!("generated {:<10} {:>5} samples", ds.name, ds.len());
        generated.push(ds);
    }
    if let Some(u) = &cfg.data.unseen {
        let ds = match &u.blend_of {
            Some([a, b]) => {
                let pa = cfg.data.domains.iter().find(|d| &d.name == a).expect("validated");
                let pb = cfg.data.domains.iter().find(|d| &d.name == b).expect("validated");
                generate_blended_domain(&u.spec, pa, pb, u.blend_gamma, offset)?
            }
            None => generate_domain(&u.spec, offset)?,
        };
        println!("generated {:<10} {:>5} samples", ds.name, ds.len());
        generated.push(ds);
    }

    // global identity disjointness across everything written
    let mut seen = std::collections::BTreeSet::new();
    for ds in &generated {
        for id in ds.unique_ids(None) {
            if !seen.insert(id) {
                return Err(Error::Protocol(format!(
                    "identity {id} generated twice across domains"
                )));
            }
        }
    }
    for ds in &generated {
        ds.save(&out.join(&ds.name))?;
    }
    Ok(())
}

fn load_domain(data: &Path, name: &str) -> Result<DomainDataset> {
    DomainDataset::load(&data.join(name))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn pretrain_base_encoder(cfg: &ExperimentConfig, data: &Path) -> Result<Encoder<f32>> {
    let base = load_domain(data, &cfg.data.base.name)?;
    let all: Vec<usize> = (0..base.len()).collect();
    let (samples, labels, _) = base.subset(&all);
    let mut encoder = Encoder::<f32>::seeded(cfg.encoder.clone(), derive_seed(cfg.seed, &[1]))?;
    let report = train_base(
        &mut encoder,
        &samples,
        &labels,
        cfg.training.pretrain_iters,
        cfg.training.pretrain_lr,
        false,
        &cfg.training,
        derive_seed(cfg.seed, &[2]),
    )?;
    println!(
        "pretrained base encoder on '{}': id accuracy {:.3}",
        base.name, report.accuracy
    );
    Ok(encoder)
}

/// Train the full lifelong sequence, scoring all seen domains after each
/// step. Returns the final state and the per-step score rows.
fn run_sequence(
    cfg: &ExperimentConfig,
    data: &Path,
    quiet: bool,
) -> Result<(LifelongState, Vec<Vec<ScoreRow>>)> {
    let encoder = pretrain_base_encoder(cfg, data)?;
    let mut state = LifelongState::new(
        encoder,
        cfg.schedule_config()?,
        cfg.adapter.rank,
        cfg.adapter.alpha,
    )?;
    let domains: Vec<DomainDataset> = cfg
        .data
        .domains
        .iter()
        .map(|d| load_domain(data, &d.name))
        .collect::<Result<_>>()?;

    let mut per_step = Vec::new();
    for (i, ds) in domains.iter().enumerate() {
        let report = state.run_step(ds, &cfg.training, derive_seed(cfg.seed, &[3, i as u64]))?;
        if !quiet {
            println!(
                "step {:>2} [{}]: stage1 accuracy {:.3}, deep mix {:?}",
                report.step + 1,
                report.domain,
                report.stage1_accuracy,
                report
                    .deep_mix
                    .weights()
                    .iter()
                    .map(|w| (w * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            );
        }
        let mut rows = Vec::new();
        for seen in domains.iter().take(i + 1) {
            let (score, _) = state.evaluate_domain(seen, &InferOptions::default())?;
            rows.push(ScoreRow {
                step: i + 1,
                domain: seen.name.clone(),
                map: score.map,
                rank1: score.rank1,
            });
        }
        if !quiet {
            for r in &rows {
                println!("   eval {:<10} mAP {:.4} rank1 {:.4}", r.domain, r.map, r.rank1);
            }
        }
        per_step.push(rows);
    }
    Ok((state, per_step))
}

fn cmd_train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let (state, per_step) = run_sequence(&cfg, data, false)?;
    state.save(out)?;

    let all_rows: Vec<ScoreRow> = per_step.iter().flatten().cloned().collect();
    write_scores_csv(&out.join("scores.csv"), &all_rows)?;
    write_forgetting_csv(&out.join("forgetting.csv"), &forgetting_report(&per_step))?;

    let last = per_step.last().expect("at least one step");
    let (avg_map, avg_r1) = average_scores(last);
    println!("final seen-average: mAP {avg_map:.4} rank1 {avg_r1:.4}");
    println!("checkpoint written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / similarity
// ---------------------------------------------------------------------------

fn print_score_table(rows: &[ScoreRow]) {
    println!("{:<16} {:>8} {:>8}", "domain", "mAP", "rank1");
    for r in rows {
        println!("{:<16} {:>8.4} {:>8.4}", r.domain, r.map, r.rank1);
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    out: Option<&Path>,
    domains: Option<&str>,
    stats_samples: Option<usize>,
    unseen: bool,
    routing: RoutingArg,
    seed: u64,
) -> Result<()> {
    let state = LifelongState::load(ckpt)?;
    let names: Vec<String> = match domains {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => state.domains.clone(),
    };

    let mut rows = Vec::new();
    let step = state.step();
    for name in &names {
        let ds = load_domain(data, name)?;
        let opts = InferOptions {
            stats_samples,
            trial_seed: seed,
            routing: match routing {
                RoutingArg::Auto => Routing::Auto,
                RoutingArg::SelfHot => {
                    let idx = state
                        .domains
                        .iter()
                        .position(|d| d == name)
                        .ok_or_else(|| {
                            Error::State(format!("domain '{name}' was never trained"))
                        })?;
                    Routing::ForcedDomain(idx)
                }
            },
        };
        let (score, _) = state.evaluate_domain(&ds, &opts)?;
        rows.push(ScoreRow {
            step,
            domain: name.clone(),
            map: score.map,
            rank1: score.rank1,
        });
    }
    let (avg_map, avg_r1) = average_scores(&rows);
    rows.push(ScoreRow {
        step,
        domain: "seen_average".into(),
        map: avg_map,
        rank1: avg_r1,
    });

    if unseen {
        let cfg_path = data.join("config.resolved.json");
        let cfg: ExperimentConfig = serde_json::from_slice(&std::fs::read(&cfg_path)?)?;
        let u = cfg
            .data
            .unseen
            .ok_or_else(|| Error::Config("no unseen domain in the data config".into()))?;
        let ds = load_domain(data, &u.spec.name)?;
        let opts = InferOptions {
            stats_samples,
            trial_seed: seed,
            routing: Routing::Auto,
        };
        let (score, _) = state.evaluate_domain(&ds, &opts)?;
        rows.push(ScoreRow {
            step,
            domain: format!("unseen:{}", u.spec.name),
            map: score.map,
            rank1: score.rank1,
        });
    }

    print_score_table(&rows);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_scores_csv(&dir.join("scores.csv"), &rows)?;
    }
    Ok(())
}

fn cmd_similarity(
    ckpt: &Path,
    data: &Path,
    out: Option<&Path>,
    stats_samples: Option<usize>,
) -> Result<()> {
    let state = LifelongState::load(ckpt)?;
    let mut test_stats = Vec::new();
    for name in &state.domains {
        let ds = load_domain(data, name)?;
        let (test_feats, _, _) = ds.subset(&ds.test_indices());
        test_stats.push(state.fit_test_stats(&test_feats, stats_samples, 0)?);
    }
    let tau = state.schedule.temperature(1)?;
    let matrix = similarity_matrix(&state.stats, &test_stats, tau)?;

    println!("knowledge similarity (reference temperature {tau:.4}):");
    print!("{:<12}", "");
    for n in &state.domains {
        print!("{n:>10}");
    }
    println!();
    for (i, n) in state.domains.iter().enumerate() {
        print!("{n:<12}");
        for v in matrix.row(i) {
            print!("{v:>10.4}");
        }
        println!();
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_similarity_csv(
            &dir.join("similarity.csv"),
            &state.domains,
            &state.domains,
            &matrix,
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct SweepRow {
    axis: &'static str,
    variant: String,
    domain: String,
    metric: &'static str,
    value: f64,
}

fn sweep_rows_for_run(
    axis: &'static str,
    variant: &str,
    cfg: &ExperimentConfig,
    data: &Path,
) -> Result<Vec<SweepRow>> {
    let (state, per_step) = run_sequence(cfg, data, true)?;
    let mut rows = Vec::new();
    let last = per_step.last().expect("steps");
    for r in last {
        rows.push(SweepRow {
            axis,
            variant: variant.into(),
            domain: r.domain.clone(),
            metric: "map",
            value: r.map,
        });
        rows.push(SweepRow {
            axis,
            variant: variant.into(),
            domain: r.domain.clone(),
            metric: "rank1",
            value: r.rank1,
        });
    }
    let (avg_map, avg_r1) = average_scores(last);
    rows.push(SweepRow {
        axis,
        variant: variant.into(),
        domain: "seen_average".into(),
        metric: "map",
        value: avg_map,
    });
    rows.push(SweepRow {
        axis,
        variant: variant.into(),
        domain: "seen_average".into(),
        metric: "rank1",
        value: avg_r1,
    });
    if let Some(u) = &cfg.data.unseen {
        if data.join(&u.spec.name).exists() {
            let ds = load_domain(data, &u.spec.name)?;
            let (score, _) = state.evaluate_domain(&ds, &InferOptions::default())?;
            rows.push(SweepRow {
                axis,
                variant: variant.into(),
                domain: format!("unseen:{}", u.spec.name),
                metric: "map",
                value: score.map,
            });
            rows.push(SweepRow {
                axis,
                variant: variant.into(),
                domain: format!("unseen:{}", u.spec.name),
                metric: "rank1",
                value: score.rank1,
            });
        }
    }
    Ok(rows)
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("axis,variant,domain,metric,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.axis, r.variant, r.domain, r.metric, r.value
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_ablate(
    axis: AblateAxis,
    config: &Path,
    data: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let mut rows = Vec::new();

    match axis {
        AblateAxis::TemperatureFamily => {
            for family in adl_core::selector::ScheduleFamily::all() {
                let mut c = cfg.clone();
                c.schedule.family = family;
                rows.extend(sweep_rows_for_run(
                    "temperature-family",
                    family.name(),
                    &c,
                    data,
                )?);
                println!("swept family {}", family.name());
            }
        }
        AblateAxis::ABGrid => {
            for &a in &[0.0, 0.25, 0.5, 1.0] {
                for &b in &[0.05, 0.1, 0.5, 2.0] {
                    let mut c = cfg.clone();
                    c.schedule.a = a;
                    c.schedule.b = b;
                    let variant = format!("a={a};b={b}");
                    rows.extend(sweep_rows_for_run("a-b-grid", &variant, &c, data)?);
                    println!("swept {variant}");
                }
            }
        }
        AblateAxis::RankAlpha => {
            for &rank in &[4usize, 16, 64] {
                for &ratio in &[0.5, 1.0, 4.0] {
                    let mut c = cfg.clone();
                    c.adapter.rank = rank;
                    c.adapter.alpha = ratio * rank as f64;
                    if c.clone().resolved().is_err() {
                        continue; // rank exceeds this encoder's dims
                    }
                    let variant = format!("r={rank};alpha_over_r={ratio}");
                    rows.extend(sweep_rows_for_run("rank-alpha", &variant, &c, data)?);
                    println!("swept {variant}");
                }
            }
        }
        AblateAxis::Sites => {
            use AdapterSite::*;
            let combos: [(&str, Vec<AdapterSite>); 6] = [
                ("q+v", vec![Q, V]),
                ("q+k+v", vec![Q, K, V]),
                ("q+v+proj", vec![Q, V, Proj]),
                ("q+k+v+proj", vec![Q, K, V, Proj]),
                ("ffn", vec![Ffn]),
                ("q+k+v+proj+ffn", vec![Q, K, V, Proj, Ffn]),
            ];
            for (name, sites) in combos {
                let mut c = cfg.clone();
                c.encoder.sites = sites;
                rows.extend(sweep_rows_for_run("sites", name, &c, data)?);
                println!("swept sites {name}");
            }
        }
        AblateAxis::StatsSamples => {
            let ckpt = ckpt.ok_or_else(|| {
                Error::Config("--ckpt is required for the stats-samples axis".into())
            })?;
            let state = LifelongState::load(ckpt)?;
            let trials = 10u64;
            for &limit in &[2usize, 4, 8, 16, 32, 64, usize::MAX] {
                let variant = if limit == usize::MAX {
                    "all".to_string()
                } else {
                    limit.to_string()
                };
                for (k, name) in state.domains.clone().iter().enumerate() {
                    let ds = load_domain(data, name)?;
                    let mut maps = 0.0;
                    let mut hits = 0usize;
                    for trial in 0..trials {
                        let opts = InferOptions {
                            stats_samples: (limit != usize::MAX).then_some(limit),
                            trial_seed: derive_seed(cfg.seed, &[limit as u64, trial]),
                            routing: Routing::Auto,
                        };
                        let (score, inf) = state.evaluate_domain(&ds, &opts)?;
                        maps += score.map;
                        if inf.per_block_mix[0].argmax() == k {
                            hits += 1;
                        }
                    }
                    rows.push(SweepRow {
                        axis: "stats-samples",
                        variant: variant.clone(),
                        domain: name.clone(),
                        metric: "map",
                        value: maps / trials as f64,
                    });
                    rows.push(SweepRow {
                        axis: "stats-samples",
                        variant: variant.clone(),
                        domain: name.clone(),
                        metric: "routing_accuracy",
                        value: hits as f64 / trials as f64,
                    });
                }
                println!("swept stats-samples {variant}");
            }
        }
        AblateAxis::FixedTemperature => {
            let variants: [(&str, f64, f64); 2] =
                [("one-hot(t=0.05)", 0.0, 0.05), ("uniform(t=2.0)", 0.0, 2.0)];
            for (name, a, b) in variants {
                let mut c = cfg.clone();
                c.schedule.a = a;
                c.schedule.b = b;
                rows.extend(sweep_rows_for_run("fixed-temperature", name, &c, data)?);
                println!("swept {name}");
            }
            rows.extend(sweep_rows_for_run(
                "fixed-temperature",
                "scheduled",
                &cfg,
                data,
            )?);
            println!("swept scheduled");
        }
    }

    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.join("sweep.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// storage-report / gradcheck / baseline
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_storage_report(
    config: Option<&Path>,
    rank: usize,
    blocks: usize,
    d_model: usize,
    ffn_dim: usize,
    sites: &str,
    stats_dim: usize,
    out: Option<&Path>,
) -> Result<()> {
    let storage_cfg = match config {
        Some(path) => {
            let cfg = load_config(path, None)?;
            StorageConfig {
                blocks: cfg.encoder.blocks,
                d_model: cfg.encoder.d_model,
                ffn_dim: cfg.encoder.ffn_dim,
                sites: cfg.encoder.sites.clone(),
                rank: cfg.adapter.rank,
                stats_dim: cfg.encoder.d_model,
            }
        }
        None => StorageConfig {
            blocks,
            d_model,
            ffn_dim,
            sites: sites
                .split(',')
                .map(|s| s.trim().parse::<AdapterSite>())
                .collect::<Result<_>>()?,
            rank,
            stats_dim,
        },
    };
    let report = storage_bytes(&storage_cfg);
    println!("{:<28} {:>14} {:>10}", "module (per dataset)", "bytes", "MiB");
    println!(
        "{:<28} {:>14} {:>10.2}",
        "adapters (f32)", report.adapter_bytes, report.adapter_mib()
    );
    println!(
        "{:<28} {:>14} {:>10.2}",
        "stats (4 B/value tier)", report.stats_bytes_accounting, report.stats_accounting_mib()
    );
    println!(
        "{:<28} {:>14} {:>10.2}",
        "stats file (f64 on disk)", report.stats_file_bytes, report.stats_file_mib()
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let csv = format!(
            "module,bytes,mib\nadapters,{},{}\nstats_accounting,{},{}\nstats_file,{},{}\n",
            report.adapter_bytes,
            report.adapter_mib(),
            report.stats_bytes_accounting,
            report.stats_accounting_mib(),
            report.stats_file_bytes,
            report.stats_file_mib()
        );
        std::fs::write(dir.join("storage.csv"), csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let reports = adl_core::gradcheck::run_full_suite(seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {:<32} max rel err {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_err
        );
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", reports.len(), failed);
    if failed > 0 {
        return Err(Error::NonFinite(format!(
            "{failed} finite-difference checks failed"
        )));
    }
    Ok(())
}

fn cmd_baseline(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;

    let mut encoder = pretrain_base_encoder(&cfg, data)?;
    let domains: Vec<DomainDataset> = cfg
        .data
        .domains
        .iter()
        .map(|d| load_domain(data, &d.name))
        .collect::<Result<_>>()?;

    let eval_plain = |enc: &Encoder<f32>, ds: &DomainDataset| -> Result<RankScore> {
        let test_idx = ds.test_indices();
        let (test_feats, test_ids, test_cams) = ds.subset(&test_idx);
        let feats = enc.encode_base(&test_feats)?;
        let mut q = Vec::new();
        let mut g = Vec::new();
        for (row, &orig) in test_idx.iter().enumerate() {
            if ds.splits[orig] == adl_core::data::Split::Query {
                q.push(row);
            } else {
                g.push(row);
            }
        }
        let gather = |rows: &[usize]| {
            let mut f = adl_core::numerics::Matrix::zeros(rows.len(), feats.cols());
            let mut ids = Vec::new();
            let mut cams = Vec::new();
            for (r, &i) in rows.iter().enumerate() {
                f.row_mut(r).copy_from_slice(feats.row(i));
                ids.push(test_ids[i]);
                cams.push(test_cams[i]);
            }
            (f, ids, cams)
        };
        let (qf, qi, qc) = gather(&q);
        let (gf, gi, gc) = gather(&g);
        adl_core::eval::rank_and_score(&qf, &qi, &qc, &gf, &gi, &gc)
    };

    let mut per_step = Vec::new();
    let mut log = Vec::new();
    for (i, ds) in domains.iter().enumerate() {
        let train_idx = ds.indices_of(adl_core::data::Split::Train);
        let (samples, labels, _) = ds.subset(&train_idx);
        let mut report = train_base(
            &mut encoder,
            &samples,
            &labels,
            cfg.training.stage2_iters,
            cfg.training.stage2_lr,
            true,
            &cfg.training,
            derive_seed(cfg.seed, &[4, i as u64]),
        )?;
        for r in &mut report.rows {
            r.step = i + 1;
        }
        log.extend(report.rows);

        let mut rows = Vec::new();
        for seen in domains.iter().take(i + 1) {
            let score = eval_plain(&encoder, seen)?;
            rows.push(ScoreRow {
                step: i + 1,
                domain: seen.name.clone(),
                map: score.map,
                rank1: score.rank1,
            });
        }
        println!("baseline step {:>2} [{}]", i + 1, ds.name);
        for r in &rows {
            println!("   eval {:<10} mAP {:.4} rank1 {:.4}", r.domain, r.map, r.rank1);
        }
        per_step.push(rows);
    }

    let all_rows: Vec<ScoreRow> = per_step.iter().flatten().cloned().collect();
    write_scores_csv(&out.join("scores.csv"), &all_rows)?;
    write_forgetting_csv(&out.join("forgetting.csv"), &forgetting_report(&per_step))?;
    write_loss_csv(&out.join("log.csv"), &log)?;
    let (avg_map, avg_r1) = average_scores(per_step.last().expect("steps"));
    println!("baseline final seen-average: mAP {avg_map:.4} rank1 {avg_r1:.4}");
    Ok(())
}
