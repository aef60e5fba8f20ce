mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use d2am::clustering::{assign_pseudo_domains, nmi, ClusterAssignment, KMeansConfig};
use d2am::data_synth::{generate_dataset, load_dataset, save_dataset, Dataset, Sample};
use d2am::domain_repr::ZScore;
use d2am::harness::{evaluate, inter_domain_mmd, model_domain_features, roc_csv, AblationVariant, MetricsReport};
use d2am::meta_trainer::{clusters_csv, train, RunMeta, CHECKPOINT_DIR, FINAL_DIR};
use d2am::model::{load_checkpoint, ModelState, CHECKPOINT_MANIFEST};
use serde::Serialize;
use serde_json::json;

use config::{load_dataset_spec, load_experiment, ExperimentConfig};

const RUN_MANIFEST: &str = "run_manifest.json";
const METRICS_FILE: &str = "metrics.json";
const ROC_FILE: &str = "roc.csv";
const RESOLVED_CONFIG: &str = "config.toml";

/// Domain-generalized spoof detection with clustered pseudo domains and
/// meta-learning.
#[derive(Parser)]
#[command(name = "d2am", version, about)]
struct Cli {
    /// Repeat for more log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints, logs and cluster labels.
    Train(TrainArgs),
    /// Score the held-out domain with a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate ablation variants.
    Ablate(AblateArgs),
    /// Inspect domain features and clusters of a checkpoint.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset spec (TOML or JSON); the built-in desk spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Spec overrides, e.g. `samples_per_domain=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory written by `synth`.
    #[arg(long, conflicts_with = "spec")]
    data: Option<PathBuf>,
    /// Generate the dataset in memory from this spec instead.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, e.g. `train.beta=1e-3` or `model.channels=[8,16,32]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or a run directory (its `final/` is used).
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Where metrics.json and roc.csv go; defaults to the checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Variant tags (comma separated) or `all`.
    #[arg(long, value_delimiter = ',', required = true)]
    variant: Vec<String>,
    /// Training seeds; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Overrides the number of pseudo domains.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Root directory; each run goes to `<out>/<tag>_seed<n>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeTarget {
    /// Checkpoint, run directory, or checkpoints directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Number of clusters; defaults to the run's K.
    #[arg(long)]
    k: Option<usize>,
    /// Use every channel of F− instead of the low-attention half.
    #[arg(long)]
    all_channels: bool,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Re-cluster training samples with each checkpoint's extractor.
    Clusters {
        #[command(flatten)]
        target: AnalyzeTarget,
        /// Output CSV of per-epoch labels.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write domain features of every sample as CSV.
    ExportDf {
        #[command(flatten)]
        target: AnalyzeTarget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inter-domain MMD of embeddings under ground-truth and pseudo domains.
    MmdReport {
        #[command(flatten)]
        target: AnalyzeTarget,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Analyze(c) => analyze(c),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(dir: &Path, command: &str, body: serde_json::Value) -> Result<()> {
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": std::env::args().collect::<Vec<_>>(),
    });
    if let (Some(m), Some(b)) = (m.as_object_mut(), body.as_object()) {
        m.extend(b.clone());
    }
    write_json(&dir.join(RUN_MANIFEST), &m)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = load_dataset_spec(a.spec.as_deref(), &a.set)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let t = Instant::now();
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &a.out)?;
    write_manifest(&a.out, "synth", json!({ "seed": spec.seed, "spec": spec }))?;
    log::info!(
        "wrote {} source and {} held-out samples to {} in {:.1}s",
        ds.source.len(),
        ds.held_out.len(),
        a.out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_data(d: &DataArgs) -> Result<Dataset> {
    match (&d.data, &d.spec) {
        (Some(dir), _) => load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())),
        (None, Some(spec)) => Ok(generate_dataset(&load_dataset_spec(Some(spec), &[])?)?),
        (None, None) => bail!("one of --data or --spec is required"),
    }
}

/// Resolves the experiment config; unset geometry follows the dataset.
fn resolve_experiment(e: &ExperimentArgs, ds: &Dataset) -> Result<ExperimentConfig> {
    let (mut cfg, explicit) = load_experiment(e.config.as_deref(), &e.set)?;
    if !explicit.image {
        cfg.model.image_size = ds.spec.image_size;
    }
    if !explicit.depth {
        cfg.model.depth_size = ds.spec.depth_size;
    }
    if let Some(s) = e.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = e.epochs {
        cfg.train.epochs = n;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let cfg = resolve_experiment(&a.experiment, &ds)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(RESOLVED_CONFIG), toml::to_string(&cfg)?)?;
    write_manifest(
        &a.out,
        "train",
        json!({ "seed": cfg.train.seed, "config": cfg, "dataset_spec": ds.spec }),
    )?;
    let t = Instant::now();
    let outcome = train(&ds, cfg.model.clone(), &cfg.train, Some(&a.out))?;
    log::info!(
        "trained {} epochs ({} iterations) in {:.1}s; final model in {}",
        outcome.epochs.len(),
        outcome.iterations.len(),
        t.elapsed().as_secs_f64(),
        a.out.join(FINAL_DIR).display()
    );
    Ok(())
}

/// Accepts a checkpoint directory or a run directory holding `final/`.
fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join(CHECKPOINT_MANIFEST).is_file() {
        p.to_path_buf()
    } else {
        p.join(FINAL_DIR)
    }
}

fn load_run(dir: &Path) -> Result<(ModelState, Option<RunMeta>)> {
    let (state, extra) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let meta = extra.map(serde_json::from_value).transpose().context("checkpoint run metadata")?;
    Ok((state, meta))
}

fn lookup<'a>(ds: &'a Dataset, ids: &[usize]) -> Result<Vec<&'a Sample>> {
    ids.iter()
        .map(|&id| {
            ds.source
                .iter()
                .find(|s| s.id == id)
                .with_context(|| format!("sample {id} not in dataset"))
        })
        .collect()
}

fn metrics_json(m: &MetricsReport) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(m)?;
    if let Some(o) = v.as_object_mut() {
        // The curve goes to roc.csv.
        o.remove("roc");
    }
    Ok(v)
}

fn write_metrics(dir: &Path, m: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(METRICS_FILE), &metrics_json(m)?)?;
    fs::write(dir.join(ROC_FILE), roc_csv(&m.roc))?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let dir = checkpoint_dir(&a.ckpt);
    let (state, meta) = load_run(&dir)?;
    let val_ids = match meta {
        Some(m) => m.val_ids,
        None => bail!("checkpoint {} has no validation ids; cannot pick a threshold", dir.display()),
    };
    let val = lookup(&ds, &val_ids)?;
    let test: Vec<&Sample> = ds.held_out.iter().collect();
    if test.is_empty() {
        bail!("dataset has no held-out samples");
    }
    let m = evaluate(&state, &val, &test)?;
    let out = a.out.unwrap_or(dir.clone());
    write_metrics(&out, &m)?;
    write_manifest(&out, "eval", json!({ "seed": state.seed, "checkpoint": dir }))?;
    println!("auc={:.4} hter={:.4} eer_threshold={:.6} n_test={}", m.auc, m.hter, m.eer_threshold, m.n_test);
    Ok(())
}

fn parse_variants(tags: &[String]) -> Result<Vec<AblationVariant>> {
    let mut out = Vec::new();
    for t in tags {
        if t == "all" {
            out.extend(AblationVariant::ALL);
        } else {
            out.push(AblationVariant::parse(t.trim())?);
        }
    }
    out.dedup();
    Ok(out)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let variants = parse_variants(&a.variant)?;
    let ds = load_data(&a.data)?;
    let base = resolve_experiment(&a.experiment, &ds)?;
    let seeds = if a.seeds.is_empty() { vec![base.train.seed] } else { a.seeds.clone() };
    fs::create_dir_all(&a.out)?;
    let mut rows = vec!["variant,seed,auc,hter,eer_threshold,val_eer,seconds".to_string()];
    for &v in &variants {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.train = v.apply(&cfg.train);
            cfg.train.seed = seed;
            if let Some(k) = a.k {
                cfg.train.k = k;
            }
            let dir = a.out.join(format!("{}_seed{}", v.tag(), seed));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(RESOLVED_CONFIG), toml::to_string(&cfg)?)?;
            write_manifest(
                &dir,
                "ablate",
                json!({ "variant": v.tag(), "seed": seed, "config": cfg, "dataset_spec": ds.spec }),
            )?;
            let t = Instant::now();
            let outcome = train(&ds, cfg.model.clone(), &cfg.train, Some(&dir))?;
            let val: Vec<&Sample> = outcome.val_idx.iter().map(|&i| &ds.source[i]).collect();
            let test: Vec<&Sample> = ds.held_out.iter().collect();
            let m = evaluate(&outcome.state, &val, &test)?;
            write_metrics(&dir, &m)?;
            let secs = t.elapsed().as_secs_f64();
            log::info!("{} seed {}: auc {:.4} hter {:.4} ({:.0}s)", v.tag(), seed, m.auc, m.hter, secs);
            rows.push(format!(
                "{},{},{},{},{},{},{:.1}",
                v.tag(),
                seed,
                m.auc,
                m.hter,
                m.eer_threshold,
                m.val_eer,
                secs
            ));
        }
    }
    rows.push(String::new());
    fs::write(a.out.join("summary.csv"), rows.join("\n"))?;
    println!("{}", rows.join("\n").trim_end());
    Ok(())
}

/// Checkpoints to analyze, in epoch order.
fn checkpoint_list(p: &Path) -> Result<Vec<PathBuf>> {
    if p.join(CHECKPOINT_MANIFEST).is_file() {
        return Ok(vec![p.to_path_buf()]);
    }
    let dir = if p.join(CHECKPOINT_DIR).is_dir() { p.join(CHECKPOINT_DIR) } else { p.to_path_buf() };
    let mut list: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CHECKPOINT_MANIFEST).is_file())
        .collect();
    list.sort();
    if list.is_empty() {
        bail!("no checkpoints under {}", p.display());
    }
    Ok(list)
}

/// Source samples the run trained on (all source samples without metadata).
fn training_indices(ds: &Dataset, meta: Option<&RunMeta>) -> Vec<usize> {
    let val: std::collections::HashSet<usize> = meta.map(|m| m.val_ids.iter().copied().collect()).unwrap_or_default();
    (0..ds.source.len()).filter(|&i| !val.contains(&ds.source[i].id)).collect()
}

struct Analysis {
    state: ModelState,
    meta: Option<RunMeta>,
    k: usize,
    select: bool,
}

fn open_analysis(dir: &Path, t: &AnalyzeTarget) -> Result<Analysis> {
    let (state, meta) = load_run(dir)?;
    let k = t.k.or(meta.as_ref().map(|m| m.k)).unwrap_or(3);
    let select = !t.all_channels && meta.as_ref().is_none_or(|m| m.hyper.select_channels);
    Ok(Analysis { state, meta, k, select })
}

fn cluster_with(
    an: &Analysis,
    ds: &Dataset,
    idx: &[usize],
    prev: Option<&ClusterAssignment>,
) -> Result<(ClusterAssignment, Vec<Vec<f64>>)> {
    let samples: Vec<&Sample> = idx.iter().map(|&i| &ds.source[i]).collect();
    let (df, emb) = model_domain_features(&an.state, &samples, an.select)?;
    let z = ZScore::fit(&df)?.apply_all(&df);
    let classes: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let epoch = an.state.epoch.max(1);
    let a = assign_pseudo_domains(&classes, &z, an.k, prev, epoch, an.state.seed, &KMeansConfig::default())?;
    Ok((a, emb))
}

fn analyze(c: AnalyzeCommand) -> Result<()> {
    match c {
        AnalyzeCommand::Clusters { target, out } => {
            let ds = load_data(&target.data)?;
            let mut history: Vec<ClusterAssignment> = Vec::new();
            let mut idx = Vec::new();
            println!("epoch,k,nmi_gt,nmi_prev");
            for dir in checkpoint_list(&target.ckpt)? {
                let an = open_analysis(&dir, &target)?;
                idx = training_indices(&ds, an.meta.as_ref());
                let (a, _) = cluster_with(&an, &ds, &idx, history.last())?;
                let gt: Vec<usize> = idx.iter().map(|&i| ds.source[i].latent_domain).collect();
                let nmi_gt = nmi(&a.zero_based(), &gt)?;
                let nmi_prev = match history.last() {
                    Some(p) => format!("{:.4}", nmi(&a.zero_based(), &p.zero_based())?),
                    None => String::new(),
                };
                println!("{},{},{:.4},{}", a.epoch, a.k, nmi_gt, nmi_prev);
                history.push(a);
            }
            fs::write(&out, clusters_csv(&ds, &idx, &history))?;
        }
        AnalyzeCommand::ExportDf { target, out } => {
            let ds = load_data(&target.data)?;
            let an = open_analysis(&checkpoint_dir(&target.ckpt), &target)?;
            let all: Vec<&Sample> = ds.source.iter().chain(&ds.held_out).collect();
            let (df, _) = model_domain_features(&an.state, &all, an.select)?;
            let dim = df.first().map_or(0, Vec::len);
            let mut s = String::from("sample_id,split,label,latent_domain");
            for d in 0..dim {
                s.push_str(&format!(",df_{d}"));
            }
            s.push('\n');
            for (smp, f) in all.iter().zip(&df) {
                let split = serde_json::to_value(smp.split)?;
                s.push_str(&format!(
                    "{},{},{},{}",
                    smp.id,
                    split.as_str().unwrap_or_default(),
                    smp.label,
                    smp.latent_domain
                ));
                for v in f {
                    s.push_str(&format!(",{v}"));
                }
                s.push('\n');
            }
            fs::write(&out, s)?;
            log::info!("wrote {} rows of {dim} features to {}", df.len(), out.display());
        }
        AnalyzeCommand::MmdReport { target, out } => {
            let ds = load_data(&target.data)?;
            let an = open_analysis(&checkpoint_dir(&target.ckpt), &target)?;
            let idx = training_indices(&ds, an.meta.as_ref());
            let (a, emb) = cluster_with(&an, &ds, &idx, None)?;
            let group = |labels: &[usize], n: usize| {
                let mut g = vec![Vec::new(); n];
                for (l, e) in labels.iter().zip(&emb) {
                    g[*l].push(e.clone());
                }
                g
            };
            let gt: Vec<usize> = idx.iter().map(|&i| ds.source[i].latent_domain).collect();
            let n_gt = gt.iter().max().map_or(0, |m| m + 1);
            let gt_mmd = inter_domain_mmd(&group(&gt, n_gt))?;
            let pseudo_mmd = inter_domain_mmd(&group(&a.zero_based(), a.k))?;
            let report = json!({
                "epoch": an.state.epoch,
                "k": a.k,
                "nmi_gt": nmi(&a.zero_based(), &gt)?,
                "ground_truth": gt_mmd,
                "pseudo": pseudo_mmd,
            });
            write_json(&out, &report)?;
            println!(
                "inter-domain MMD: ground truth {:.5}, pseudo {:.5}",
                gt_mmd.mean_off_diagonal, pseudo_mmd.mean_off_diagonal
            );
        }
    }
    Ok(())
}
