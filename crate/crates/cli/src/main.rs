mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use strata::batch_planner::{self, BatchManifest, BatchPlanConfig, RemainderPolicy, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};
use strata::contrastive_loss::{self, LossConfig, DEFAULT_HARDNESS_MARGIN, DEFAULT_TEMPERATURE};
use strata::corpus_io::{self, write_all_atomic, EmbeddingSet};
use strata::experiment_harness::{self, CompareConfig, ComparisonReport, SyntheticSpec};
use strata::geometry_bounds::{self, GuaranteeConfig};
use strata::sphere_kmeans::{self, ClusterModel, DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use strata::stratifier::{self, Side, StratificationPlan, DEFAULT_STATS_SAMPLE_SIZE};

const EXIT_DATA: u8 = 3;
const EXIT_INTEGRITY: u8 = 4;

/// Semantic stratification of contrastive pretraining data.
#[derive(Parser, Debug)]
#[command(name = "strata", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit spherical k-means on an embedding file.
    Cluster(ClusterArgs),
    /// Per-cluster mean pairwise cosine similarity.
    Stats(StatsArgs),
    /// Split a pair dataset into one stratum per cluster.
    Stratify(StratifyArgs),
    /// Write a single-stratum batch manifest.
    Plan(PlanArgs),
    /// Check a manifest against its stratification plan.
    Validate(ValidateArgs),
    /// InfoNCE loss and hardness for every batch of a manifest.
    Score(ScoreArgs),
    /// Stratified vs. shuffled batches under the same embeddings.
    Compare(CompareArgs),
    /// Certified vs. measured similarity bounds per stratum.
    Bounds(BoundsArgs),
    /// Draw a synthetic clustered corpus.
    Generate(GenerateArgs),
    /// Write SVG charts.
    #[command(subcommand)]
    Plot(PlotCommand),
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Embedding file (little-endian f32 with a .meta sidecar).
    embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Output prefix [default: the embedding path without extension].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    embeddings: PathBuf,
    /// Cluster model prefix.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STATS_SAMPLE_SIZE)]
    sample_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StratifyArgs {
    /// Pair dataset (TSV: pair_id, query_ref, item_ref).
    pairs: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Which side the model was fitted on.
    #[arg(long, default_value_t = Side::Item)]
    side: Side,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BatchArgs {
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = RemainderPolicy::DropLast)]
    remainder: RemainderPolicy,
}

impl BatchArgs {
    fn config(&self) -> BatchPlanConfig {
        BatchPlanConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            remainder_policy: self.remainder,
        }
    }
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Stratification plan; omit with --unstratified.
    #[arg(required_unless_present = "unstratified")]
    plan: Option<PathBuf>,
    /// Plan uniformly shuffled batches over this pair dataset instead.
    #[arg(long, conflicts_with = "plan")]
    unstratified: Option<PathBuf>,
    #[command(flatten)]
    batch: BatchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    manifest: PathBuf,
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    manifest: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    items: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_HARDNESS_MARGIN)]
    margin: f64,
    /// Score only this epoch.
    #[arg(long)]
    epoch: Option<usize>,
    /// JSON lines: one record per query plus one summary per batch.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = Side::Item)]
    side: Side,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = RemainderPolicy::DropLast)]
    remainder: RemainderPolicy,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_HARDNESS_MARGIN)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for compare.json, compare.txt and the two loss series.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = GuaranteeConfig::default().items_per_stratum)]
    items_per_stratum: usize,
    #[arg(long, default_value_t = GuaranteeConfig::default().queries_per_stratum)]
    queries_per_stratum: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 1000)]
    pairs_per_cluster: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 10.0)]
    concentration: f64,
    #[arg(long, default_value_t = 0.2)]
    query_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes queries.f32, items.f32, pairs.tsv, labels.tsv and synthetic.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum PlotCommand {
    /// Per-batch loss of both arms from a compare.json.
    Loss {
        report: PathBuf,
        /// Rolling-average window in batches.
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cluster similarity bars from a stats TSV.
    Stats {
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    eprintln!("strata: resolved {:?}", cli.command);
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("strata: error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<strata::Error>() {
        Some(e) if !e.is_input_error() => EXIT_INTEGRITY,
        _ => EXIT_DATA,
    }
}

/// Load embeddings and normalize them; normalization is idempotent.
fn load_unit(path: &Path) -> anyhow::Result<EmbeddingSet> {
    let e = corpus_io::load_embeddings(path, None)?;
    if e.is_normalized() {
        return Ok(e);
    }
    Ok(corpus_io::normalize_rows(&e)?)
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Cluster(a) => {
            let e = load_unit(&a.embeddings)?;
            let m = sphere_kmeans::fit(&e, a.k, a.max_iters, a.tol, a.seed)?;
            let prefix = a.out.unwrap_or_else(|| a.embeddings.with_extension(""));
            write_all_atomic(&m.file_contents(&prefix))?;
            eprintln!(
                "strata: {} iterations, objective {:.6}, sizes {:?}",
                m.iterations,
                m.final_objective(),
                m.cluster_sizes()
            );
        }
        Command::Stats(a) => {
            let e = load_unit(&a.embeddings)?;
            let m = ClusterModel::load(&a.model)?;
            let report = stratifier::cluster_stats(&e, &m, a.sample_size, a.seed)?;
            write_all_atomic(&[(a.out, report.to_tsv().into_bytes())])?;
        }
        Command::Stratify(a) => {
            let d = corpus_io::load_pairs(&a.pairs)?;
            let m = ClusterModel::load(&a.model)?;
            let s = stratifier::split(&d, &m, a.side, &m.centroids.checksum())?;
            write_all_atomic(&s.file_contents(&a.out))?;
            eprintln!("strata: stratum sizes {:?}", s.sizes());
        }
        Command::Plan(a) => {
            let cfg = a.batch.config();
            let manifest = match (&a.plan, &a.unstratified) {
                (Some(p), None) => batch_planner::plan(&StratificationPlan::load(p)?, &cfg)?,
                (None, Some(d)) => batch_planner::plan_unstratified(&corpus_io::load_pairs(d)?, &cfg)?,
                _ => bail!("give exactly one of a plan path or --unstratified"),
            };
            write_all_atomic(&[(a.out, manifest.to_text().into_bytes())])?;
            for w in &manifest.warnings {
                eprintln!("strata: warning: {w}");
            }
        }
        Command::Validate(a) => {
            let m = BatchManifest::load(&a.manifest)?;
            let s = StratificationPlan::load(&a.plan)?;
            let report = batch_planner::validate(&m, &s)?;
            for v in &report.violations {
                println!("{v:?}");
            }
            println!("checked {} batches, {} violations", report.batches_checked, report.violations.len());
            if !report.is_valid() {
                return Ok(ExitCode::from(EXIT_INTEGRITY));
            }
        }
        Command::Score(a) => score(a)?,
        Command::Compare(a) => {
            let queries = load_unit(&a.queries)?;
            let items = load_unit(&a.items)?;
            let d = corpus_io::load_pairs(&a.pairs)?;
            let cfg = CompareConfig {
                k: a.k,
                side: a.side,
                max_iters: a.max_iters,
                tol: a.tol,
                batch: BatchPlanConfig {
                    batch_size: a.batch_size,
                    epochs: 1,
                    seed: a.seed,
                    remainder_policy: a.remainder,
                },
                loss: LossConfig {
                    temperature: a.temperature,
                },
                hardness_margin: a.margin,
            };
            let report = experiment_harness::compare(&queries, &items, &d, &cfg)?;
            let dir = &a.out_dir;
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let table = report.to_table();
            write_all_atomic(&[
                (dir.join("compare.json"), report.to_json().into_bytes()),
                (dir.join("compare.txt"), table.clone().into_bytes()),
                (
                    dir.join("series_shuffled.tsv"),
                    ComparisonReport::series_tsv(&report.per_batch_shuffled).into_bytes(),
                ),
                (
                    dir.join("series_stratified.tsv"),
                    ComparisonReport::series_tsv(&report.per_batch_stratified).into_bytes(),
                ),
            ])?;
            print!("{table}");
        }
        Command::Bounds(a) => {
            let queries = load_unit(&a.queries)?;
            let items = load_unit(&a.items)?;
            let m = ClusterModel::load(&a.model)?;
            let s = StratificationPlan::load(&a.plan)?;
            let cfg = GuaranteeConfig {
                items_per_stratum: a.items_per_stratum,
                queries_per_stratum: a.queries_per_stratum,
                seed: a.seed,
            };
            let report = geometry_bounds::cluster_guarantee_report(&items, &m, &s, &queries, &cfg)?;
            write_all_atomic(&[(a.out, report.to_tsv().into_bytes())])?;
            eprintln!("strata: vacuous in-stratum lower bounds: {:.3}", report.vacuous_fraction());
        }
        Command::Generate(a) => {
            let spec = SyntheticSpec {
                n_clusters: a.clusters,
                pairs_per_cluster: a.pairs_per_cluster,
                dim: a.dim,
                concentration: a.concentration,
                query_noise: a.query_noise,
                seed: a.seed,
            };
            let corpus = experiment_harness::generate(&spec)?;
            let dir = &a.out_dir;
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut files = corpus.queries.file_contents(&dir.join("queries.f32"));
            files.extend(corpus.items.file_contents(&dir.join("items.f32")));
            files.push((dir.join("pairs.tsv"), corpus.pairs.to_tsv().into_bytes()));
            let labels: String = corpus.labels.iter().enumerate().map(|(i, l)| format!("{i}\t{l}\n")).collect();
            files.push((dir.join("labels.tsv"), labels.into_bytes()));
            files.push((dir.join("synthetic.json"), serde_json::to_string_pretty(&spec)?.into_bytes()));
            write_all_atomic(&files)?;
        }
        Command::Plot(PlotCommand::Loss { report, window, out }) => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let r: ComparisonReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", report.display()))?;
            let svg = plot::loss_chart(&r, window.max(1), &report.display().to_string());
            write_all_atomic(&[(out, svg.into_bytes())])?;
        }
        Command::Plot(PlotCommand::Stats { report, out }) => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let bars = plot::parse_stats(&text).with_context(|| format!("parsing {}", report.display()))?;
            let svg = plot::stats_chart(&bars, &report.display().to_string());
            write_all_atomic(&[(out, svg.into_bytes())])?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn score(a: ScoreArgs) -> anyhow::Result<()> {
    let m = BatchManifest::load(&a.manifest)?;
    let queries = load_unit(&a.queries)?;
    let items = load_unit(&a.items)?;
    if queries.count() != items.count() {
        bail!(
            "{} has {} rows but {} has {}",
            a.queries.display(),
            queries.count(),
            a.items.display(),
            items.count()
        );
    }
    let cfg = LossConfig {
        temperature: a.temperature,
    };
    cfg.validate()?;
    let mut out = String::new();
    for batch in m.batches.iter().filter(|b| a.epoch.is_none_or(|e| e == b.epoch)) {
        if let Some(&bad) = batch.pair_indices.iter().find(|&&i| i >= queries.count()) {
            bail!(
                "batch {} references pair {bad}, but the embeddings have {} rows",
                batch.batch_id,
                queries.count()
            );
        }
        let scores = contrastive_loss::similarity_matrix(
            &queries.select(&batch.pair_indices)?,
            &items.select(&batch.pair_indices)?,
            &cfg,
        )?;
        let hardness = contrastive_loss::hardness_stats(&scores, a.margin)?;
        let report = contrastive_loss::infonce(&scores)?.with_hardness(&hardness);
        for (slot, &pair) in batch.pair_indices.iter().enumerate() {
            let rec = serde_json::json!({
                "batch_id": batch.batch_id,
                "epoch": batch.epoch,
                "pair_index": pair,
                "loss": report.per_query_loss[slot],
                "smoothmax": report.smoothmax_term[slot],
                "positive": report.positive_term[slot],
                "active_negatives": report.active_negative_counts[slot],
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "batch_id": batch.batch_id,
            "epoch": batch.epoch,
            "stratum": batch.stratum,
            "size": batch.pair_indices.len(),
            "mean_loss": report.mean_loss,
            "mean_active": hardness.mean_active,
            "fraction_without_active": hardness.fraction_without_active,
            "temperature": a.temperature,
            "margin": a.margin,
            "manifest_digest": m.digest(),
        });
        out.push_str(&summary.to_string());
        out.push('\n');
    }
    write_all_atomic(&[(a.out, out.into_bytes())])?;
    Ok(())
}
