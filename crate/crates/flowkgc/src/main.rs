//! Command-line entry point: dataset generation, training, evaluation,
//! k-shot sweeps, and checkpoint inspection.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use flowkgc::config::{self, FileConfig};
use flowkgc::diffcore::ParamStore;
use flowkgc::evalharness::{evaluate, kshot_sweep, sweep_tsv, CandidatePolicy, EvalConfig};
use flowkgc::kgdata::{
    init_embeddings, load_embeddings, load_triples, pretrain_transe, save_embeddings,
    EmbeddingTable, KnowledgeGraph, TaskSplit,
};
use flowkgc::model::Model;
use flowkgc::npflow::FlowKind;
use flowkgc::synth;
use flowkgc::trainer::{
    load_checkpoint, model_from_checkpoint, save_checkpoint, train, Checkpoint,
    LossOrientation, CHECKPOINT_VERSION,
};

#[derive(Parser)]
#[command(name = "flowkgc", about = "Few-shot knowledge graph completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic compositional dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test relations.
    Eval(EvalArgs),
    /// Evaluate one checkpoint across several support sizes.
    Sweep(SweepArgs),
    /// Print checkpoint metadata.
    InspectCheckpoint { checkpoint: PathBuf },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (FLOWKGC_OUT overrides).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    train_relations: Option<usize>,
    #[arg(long)]
    valid_relations: Option<usize>,
    #[arg(long)]
    test_relations: Option<usize>,
    #[arg(long)]
    arity: Option<usize>,
    #[arg(long)]
    one_to_many_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory holding triples.tsv and split.json.
    #[arg(long)]
    data: PathBuf,
    /// Pretrained embedding file; omitted means TransE pretraining on the
    /// background graph.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_z: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    flow: Option<FlowKind>,
    #[arg(long)]
    flow_depth: Option<usize>,
    #[arg(long)]
    freeze_embeddings: bool,
    #[arg(long)]
    loss_orientation: Option<LossOrientation>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split's relations to rank: "valid" or "test".
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated support sizes.
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    ks: Vec<usize>,
    /// Monte Carlo samples for the entropy column.
    #[arg(long, default_value_t = 256)]
    mc_samples: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::InspectCheckpoint { checkpoint } => cmd_inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    /// Bad arguments or configuration: exit code 2.
    Usage(String),
    /// Failure while doing the work: exit code 1.
    Runtime(String),
}

impl From<flowkgc::config::ConfigError> for CliError {
    fn from(e: flowkgc::config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    std::io::Error,
    flowkgc::kgdata::KgError,
    flowkgc::synth::SynthError,
    flowkgc::trainer::TrainError,
    flowkgc::evalharness::EvalError,
    serde_json::Error
);

fn load_config(args: &CommonArgs) -> Result<(FileConfig, PathBuf), CliError> {
    let cfg = config::load(args.config.as_deref())?;
    let out = config::resolve_out_dir(&args.out);
    Ok((cfg, out))
}

/// Load a dataset directory and hide all few-shot relation edges from the
/// message graph.
fn load_dataset(dir: &Path) -> Result<(KnowledgeGraph, TaskSplit), CliError> {
    let (mut kg, _) = load_triples(dir.join("triples.tsv"))?;
    let split = TaskSplit::load(dir.join("split.json"), &kg)?;
    split.check_disjoint(&kg)?;
    let excluded: HashSet<usize> = split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .copied()
        .collect();
    kg.rebuild_adjacency(&excluded);
    Ok((kg, split))
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let (mut cfg, out) = load_config(&args.common)?;
    let s = &mut cfg.synth;
    if let Some(v) = args.common.seed {
        s.seed = v;
    }
    if let Some(v) = args.entities {
        s.num_entities = v;
    }
    if let Some(v) = args.train_relations {
        s.train_relations = v;
    }
    if let Some(v) = args.valid_relations {
        s.valid_relations = v;
    }
    if let Some(v) = args.test_relations {
        s.test_relations = v;
    }
    if let Some(v) = args.arity {
        s.arity = v;
    }
    if let Some(v) = args.one_to_many_fraction {
        s.one_to_many_fraction = v;
    }
    let data = synth::generate(&cfg.synth).map_err(|e| CliError::Usage(e.to_string()))?;
    synth::write_dataset(&out, &data)?;
    config::write_resolved(&out, &cfg)?;
    println!(
        "wrote {} triples, {} relations to {}",
        data.triples.len(),
        data.train.len() + data.valid.len() + data.test.len(),
        out.display()
    );
    Ok(())
}

/// TransE pretraining on the background graph only.
fn background_embeddings(
    kg: &KnowledgeGraph,
    split: &TaskSplit,
    d: usize,
    seed: u64,
) -> Result<EmbeddingTable, CliError> {
    let task_rels: HashSet<usize> = split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .copied()
        .collect();
    let mut bg = kg.clone();
    bg.triples.retain(|&(_, r, _)| !task_rels.contains(&r));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    if bg.triples.is_empty() {
        return Ok(init_embeddings(kg, d, &mut rng));
    }
    Ok(pretrain_transe(&bg, d, 1000, 1.0, 0.01, &mut rng)?)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (mut cfg, out) = load_config(&args.common)?;
    let t = &mut cfg.train;
    if let Some(v) = args.common.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.k {
        t.k = v;
    }
    if let Some(v) = args.d {
        t.model.d = v;
    }
    if let Some(v) = args.d_z {
        t.model.d_z = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.flow {
        t.model.flow_kind = v;
    }
    if let Some(v) = args.flow_depth {
        t.model.flow_depth = v;
    }
    if args.freeze_embeddings {
        t.model.freeze_embeddings = true;
    }
    if let Some(v) = args.loss_orientation {
        t.loss_orientation = v;
    }
    if let Some(v) = args.patience {
        t.patience = v;
    }
    if let Some(v) = args.episodes_per_epoch {
        t.episodes_per_epoch = v;
    }

    let (kg, split) = load_dataset(&args.data)?;
    let emb = match &args.embeddings {
        Some(path) => load_embeddings(path, &kg)?,
        None => background_embeddings(&kg, &split, cfg.train.model.d, cfg.train.seed)?,
    };
    fs::create_dir_all(&out)?;
    config::write_resolved(&out, &cfg)?;
    save_embeddings(&emb, &kg, out.join("embeddings-init.txt"))?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.train.seed);
    let mut params = ParamStore::new();
    let model = Model::new(&mut params, cfg.train.model.clone(), &emb, &mut rng);
    let mut log = fs::File::create(out.join("train.log"))?;
    let result = train(&model, &mut params, &kg, &split, &cfg.train, &mut log)?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.train.clone(),
        params,
        adam: flowkgc::diffcore::AdamState::new(cfg.train.lr),
        epoch: result.epochs_run,
        best_val_mrr: result.best_val_mrr,
    };
    save_checkpoint(out.join("checkpoint.json"), &ckpt)?;
    fs::write(
        out.join("train-result.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    println!(
        "trained {} epochs, best validation MRR {:.4}; checkpoint in {}",
        result.epochs_run,
        result.best_val_mrr,
        out.display()
    );
    Ok(())
}

fn split_relations<'s>(split: &'s TaskSplit, which: &str) -> Result<&'s [usize], CliError> {
    match which {
        "valid" => Ok(&split.valid),
        "test" => Ok(&split.test),
        other => Err(CliError::Usage(format!(
            "unknown split `{other}`, expected valid or test"
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (_, out) = load_config(&args.common)?;
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let (params, model) = model_from_checkpoint(&ckpt)?;
    let (kg, split) = load_dataset(&args.data)?;
    let relations = split_relations(&split, &args.split)?;
    let eval_cfg = EvalConfig {
        k: args.k.unwrap_or(ckpt.config.k),
        n: ckpt.config.n,
        candidates: CandidatePolicy::AllEntities,
        seed: args.common.seed.unwrap_or(ckpt.config.seed),
    };
    let report = evaluate(&model, &params, &kg, relations, &eval_cfg)?;
    fs::create_dir_all(&out)?;
    fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{} split: MRR {:.4} Hits@1 {:.4} Hits@5 {:.4} Hits@10 {:.4} over {} queries",
        args.split,
        report.aggregate.mrr,
        report.aggregate.hits1,
        report.aggregate.hits5,
        report.aggregate.hits10,
        report.aggregate.num_queries
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let (_, out) = load_config(&args.common)?;
    if args.ks.is_empty() {
        return Err(CliError::Usage("--ks must not be empty".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let (params, model) = model_from_checkpoint(&ckpt)?;
    let (kg, split) = load_dataset(&args.data)?;
    let relations = split_relations(&split, &args.split)?;
    let rows = kshot_sweep(
        &model,
        &params,
        &kg,
        relations,
        &args.ks,
        ckpt.config.n,
        args.mc_samples,
        args.common.seed.unwrap_or(ckpt.config.seed),
    )?;
    let tsv = sweep_tsv(&rows);
    fs::create_dir_all(&out)?;
    fs::write(out.join("sweep.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(path, None)?;
    let total: usize = ckpt.params.iter().map(|(_, p)| p.value.len()).sum();
    println!("version: {}", ckpt.version);
    println!("epoch: {}", ckpt.epoch);
    println!("best_val_mrr: {}", ckpt.best_val_mrr);
    println!("parameters: {} tensors, {} values", ckpt.params.len(), total);
    println!(
        "model: d={} d_z={} gnn_layers={} flow={:?} depth={}",
        ckpt.config.model.d,
        ckpt.config.model.d_z,
        ckpt.config.model.gnn_layers,
        ckpt.config.model.flow_kind,
        ckpt.config.model.flow_depth
    );
    Ok(())
}
