use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use pcqa_core::eval::{evaluate, plan_folds, FoldPlan, Protocol};
use pcqa_core::mae::pretrain::{load_pairs, pretrain, PretrainConfig};
use pcqa_core::manifest::Manifest;
use pcqa_core::mi::bench::{run as run_mi_bench, MiBenchConfig};
use pcqa_core::minipatch::{build_map, GridSpec};
use pcqa_core::model::{ModelTemplate, QualityModel};
use pcqa_core::pointcloud::corpus::{synthesize_corpus, CorpusConfig};
use pcqa_core::pointcloud::{normalize_unit_sphere, read_ply};
use pcqa_core::render::{render_views, RenderConfig, ViewSet};
use pcqa_core::train::{train_from_manifest, TrainConfig};

#[derive(Parser)]
#[command(name = "pcqa", version, about = "No-reference point cloud quality assessment")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a point cloud from up to six poses.
    Render(RenderArgs),
    /// Build a mini-patch map from rendered views.
    Minipatch(MinipatchArgs),
    /// Masked cross-reconstruction pretraining of the content encoder.
    Pretrain(PretrainArgs),
    /// Train the quality model with MI disentanglement.
    Train(TrainArgs),
    /// Calibrate the MI estimator on correlated Gaussians (CSV on stdout).
    MiBench(MiBenchArgs),
    /// Evaluate a trained model on content-disjoint folds.
    Eval(EvalArgs),
    /// Write a synthetic distorted corpus with pseudo-MOS.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    views: usize,
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    splat: usize,
    /// Pose perturbation seed; 0 keeps the canonical poses. Defaults to --seed.
    #[arg(long)]
    pose_seed: Option<u64>,
}

#[derive(Args)]
struct MinipatchArgs {
    /// Directory written by `render`.
    #[arg(long)]
    views: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Provenance CSV; defaults to the output path with a .csv extension.
    #[arg(long)]
    provenance: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    grids: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML pretraining configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    content_ckpt: PathBuf,
    /// TOML with optional `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MiBenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.8])]
    rho: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4])]
    dim: Vec<usize>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 20)]
    eval_batches: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Model TOML; defaults to the checkpoint path with a .toml extension.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// JSON fold plan, or a protocol such as `{"kind": "k_fold", "k": 5}`.
    #[arg(long)]
    folds: PathBuf,
    /// Report JSON; a CSV copy is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    contents: usize,
    #[arg(long, default_value_t = 4096)]
    points: usize,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelTemplate,
    train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FoldsFile {
    Plan(FoldPlan),
    Protocol(Protocol),
}

fn read_toml<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn render(args: RenderArgs, seed: u64) -> Result<()> {
    let pc = normalize_unit_sphere(&read_ply(&args.input)?)?;
    let cfg = RenderConfig {
        width: args.size,
        height: args.size,
        splat_radius: args.splat,
    };
    let set = render_views(&pc, args.views, &cfg, args.pose_seed.unwrap_or(seed))?;
    set.save(&args.out)?;
    log::info!("wrote {} views to {}", set.len(), args.out.display());
    Ok(())
}

fn minipatch(args: MinipatchArgs, seed: u64) -> Result<()> {
    let set = ViewSet::load(&args.views)?;
    let first = set.views.first().context("no views found")?;
    let spec = GridSpec {
        grids: args.grids,
        patch: args.patch,
        height: first.height,
        width: first.width,
    };
    let map = build_map(&set.views, &spec, seed)?;
    let prov = args.provenance.unwrap_or_else(|| args.out.with_extension("csv"));
    map.save(&args.out, &prov)?;
    let fills = map.provenance.iter().filter(|p| p.is_fill()).count();
    log::info!("{} slots, {fills} filled by resampling", map.provenance.len());
    Ok(())
}

fn pretrain_cmd(args: PretrainArgs, seed: u64) -> Result<()> {
    let mut cfg: PretrainConfig = read_toml(args.config.as_deref())?;
    cfg.seed = seed;
    let manifest = Manifest::load(&args.manifest)?;
    let pairs = load_pairs(&manifest)?;
    create_dir(&args.out)?;
    let ckpt = args.out.join("pretrain.ckpt");
    let outcome = pretrain(&cfg, &pairs, Some(&ckpt), args.resume.as_deref())?;
    let mut csv = String::from("epoch,loss\n");
    for e in &outcome.log {
        csv.push_str(&format!("{},{}\n", e.epoch, e.loss));
    }
    write(&args.out.join("pretrain_loss.csv"), csv.as_bytes())?;
    write(&args.out.join("pretrain.toml"), toml::to_string(&cfg)?.as_bytes())?;
    log::info!("checkpoint at {}", ckpt.display());
    Ok(())
}

fn train_cmd(args: TrainArgs, seed: u64) -> Result<()> {
    let mut file: TrainFile = read_toml(args.config.as_deref())?;
    file.train.seed = seed;
    let manifest = Manifest::load(&args.manifest)?;
    let outcome = train_from_manifest(&manifest, None, &args.content_ckpt, &file.model, &file.train)?;
    create_dir(&args.out)?;
    outcome.best.save(&args.out.join("model.ckpt"), &args.out.join("model.toml"))?;
    write(&args.out.join("epoch_log.csv"), &outcome.log.epochs_csv()?)?;
    write(&args.out.join("batch_log.csv"), &outcome.log.batches_csv()?)?;
    log::info!("best epoch {} written to {}", outcome.best_epoch, args.out.display());
    Ok(())
}

fn mi_bench(args: MiBenchArgs, seed: u64) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "rho,dim,true_mi,estimate,std_err,final_nll")?;
    for &dim in &args.dim {
        for &rho in &args.rho {
            let cfg = MiBenchConfig {
                samples: args.samples,
                steps: args.steps,
                eval_batches: args.eval_batches,
                lr: args.lr,
                seed,
                ..MiBenchConfig::new(rho, dim)
            };
            let r = run_mi_bench(&cfg)?;
            let nll = r.nll_trace.last().copied().unwrap_or(f64::NAN);
            writeln!(out, "{rho},{dim},{},{},{},{nll}", r.true_mi, r.estimate, r.std_err)?;
        }
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs, seed: u64) -> Result<()> {
    let model_cfg = args.model_config.unwrap_or_else(|| args.ckpt.with_extension("toml"));
    let model = QualityModel::load(&args.ckpt, &model_cfg)?;
    let manifest = Manifest::load(&args.manifest)?;
    let text = std::fs::read_to_string(&args.folds).with_context(|| format!("reading {}", args.folds.display()))?;
    let plan = match serde_json::from_str(&text).context("parsing the fold file")? {
        FoldsFile::Plan(p) => p,
        FoldsFile::Protocol(p) => plan_folds(&manifest.content_ids(), p, seed)?,
    };
    let report = evaluate(&model, &manifest, &plan)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.save(&args.out, &args.out.with_extension("csv"))?;
    println!(
        "SROCC {:.4} PLCC {:.4} RMSE {:.4}",
        report.mean.srocc, report.mean.plcc, report.mean.rmse
    );
    Ok(())
}

fn synth(args: SynthArgs, seed: u64) -> Result<()> {
    let cfg = CorpusConfig {
        contents: args.contents,
        points: args.points,
        seed,
        ..CorpusConfig::default()
    };
    let m = synthesize_corpus(&cfg, &args.out)?;
    log::info!("{} stimuli in {}", m.records.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Render(a) => render(a, cli.seed),
        Command::Minipatch(a) => minipatch(a, cli.seed),
        Command::Pretrain(a) => pretrain_cmd(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::MiBench(a) => mi_bench(a, cli.seed),
        Command::Eval(a) => eval_cmd(a, cli.seed),
        Command::Synth(a) => synth(a, cli.seed),
    }
}
