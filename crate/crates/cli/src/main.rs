use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use hierdp::budgeting::predict_with_objective;
use hierdp::{
    build_tree, equal_split, greedy_split, leaves_only_split, load_records, noise_tree, run_experiment,
    seeded_stream, temporal_split, tree_post_process, BudgetSplit, DatasetSpec, Error, ErrorCategory,
    ExperimentConfig, GreedyConfig, HierTree, NoiseConfig, NoiseMode, Objective, PriorSource,
    PriorTree, Result, SyntheticSpec,
};

#[derive(Parser)]
#[command(name = "hierdp", version, about = "Private hierarchical count release and budget tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and write its count tree.
    BuildTree(BuildTreeArgs),
    /// Compute a per-level budget split for a tree.
    Budget(BudgetArgs),
    /// Noise a tree under a split and write raw and post-processed estimates.
    Postprocess(PostprocessArgs),
    /// Run an experiment grid from a config file.
    Experiment(ExperimentArgs),
    /// Generate a synthetic impression log.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    All,
    Prior,
    Eval,
}

#[derive(Args)]
struct BuildTreeArgs {
    /// Dataset spec (TOML or JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Which side of the temporal split to aggregate.
    #[arg(long, value_enum, default_value = "all")]
    side: Side,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitMethod {
    Equal,
    Leaves,
    Greedy,
}

#[derive(Args)]
struct BudgetArgs {
    /// Prior tree in the node-per-line text format.
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "greedy")]
    method: SplitMethod,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = GreedyConfig::DEFAULT_PHASES)]
    k: usize,
    #[arg(long, default_value_t = GreedyConfig::DEFAULT_GAMMA)]
    gamma: f64,
    /// Optimize the error of raw measurements instead of post-processed ones.
    #[arg(long)]
    raw: bool,
    /// One split per first-level subtree.
    #[arg(long)]
    per_group: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Abstract,
    ApiFaithful,
}

impl From<ModeArg> for NoiseMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Abstract => NoiseMode::Abstract,
            ModeArg::ApiFaithful => NoiseMode::ApiFaithful,
        }
    }
}

#[derive(Args)]
struct PostprocessArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Split JSON, either bare or as written by `budget`.
    #[arg(long, conflicts_with = "epsilon")]
    split: Option<PathBuf>,
    /// Use an equal split at this total instead of a split file.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "abstract")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, overrides_with = "no_per_group")]
    per_group: bool,
    #[arg(long)]
    no_per_group: bool,
    /// Share noise draws across methods.
    #[arg(long)]
    paired: bool,
    /// Results CSV; metadata goes next to it with a `.meta.json` suffix.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (TOML or JSON). Defaults to the built-in benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_tree(path: &Path) -> Result<HierTree> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    HierTree::from_text(&text)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn sibling_path(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn build_tree_cmd(args: BuildTreeArgs) -> Result<()> {
    let mut spec: DatasetSpec = read_config(&args.dataset)?;
    if spec.path.is_relative() {
        if let Some(dir) = args.dataset.parent() {
            spec.path = dir.join(&spec.path);
        }
    }
    let loaded = load_records(&spec)?;
    if loaded.malformed_rows > 0 {
        eprintln!("skipped {} malformed rows", loaded.malformed_rows);
        for (row, reason) in &loaded.malformed_samples {
            eprintln!("  row {row}: {reason}");
        }
    }
    let records = match args.side {
        Side::All => loaded.records,
        side => {
            let cutoff = spec
                .prior_cutoff_timestamp
                .or_else(|| {
                    spec.prior_fraction
                        .and_then(|f| hierdp::ingest::cutoff_from_fraction(&loaded.records, f))
                })
                .ok_or_else(|| Error::Config("dataset spec has no prior cutoff".into()))?;
            let (prior, eval) = temporal_split(&loaded.records, cutoff);
            if matches!(side, Side::Prior) {
                prior
            } else {
                eval
            }
        }
    };
    let tree = build_tree(&records, &spec.schema()?)?;
    fs::write(&args.out, tree.to_text()?)?;
    eprintln!("{} records, {} nodes", records.len(), tree.len());
    Ok(())
}

fn budget_one(args: &BudgetArgs, prior: &PriorTree) -> Result<(BudgetSplit, f64)> {
    let levels = prior.num_levels();
    let objective = if args.raw { Objective::Raw } else { Objective::PostProcessed };
    let split = match args.method {
        SplitMethod::Equal => equal_split(args.epsilon, levels)?,
        SplitMethod::Leaves => leaves_only_split(args.epsilon, levels, args.gamma)?,
        SplitMethod::Greedy => {
            let cfg = GreedyConfig::new(args.k, args.gamma, args.tau)?.objective(objective);
            greedy_split(prior, args.epsilon, &cfg)?
        }
    };
    let predicted = predict_with_objective(prior, split.levels(), args.tau, objective)?;
    Ok((split, predicted))
}

fn budget_cmd(args: BudgetArgs) -> Result<()> {
    let tree = read_tree(&args.tree)?;
    let prior = PriorTree::from(&tree);
    let value = if args.per_group {
        let topo = prior.topology();
        let groups = topo
            .children(topo.root())
            .iter()
            .map(|&g| {
                let (split, predicted) = budget_one(&args, &prior.subtree(g))?;
                Ok(json!({
                    "group": prior.paths()[g].join("/"),
                    "predicted_rmsre": predicted,
                    "split": split,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        json!({ "tau": args.tau, "groups": groups })
    } else {
        let (split, predicted) = budget_one(&args, &prior)?;
        json!({ "tau": args.tau, "predicted_rmsre": predicted, "split": split })
    };
    match &args.out {
        Some(path) => write_json(path, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn read_split(path: &Path) -> Result<BudgetSplit> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("split") {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn postprocess_cmd(args: PostprocessArgs) -> Result<()> {
    let tree = read_tree(&args.tree)?;
    let levels = tree.topology().num_levels();
    let split = match (&args.split, args.epsilon) {
        (Some(path), _) => read_split(path)?,
        (None, Some(eps)) => equal_split(eps, levels)?,
        (None, None) => return Err(Error::Config("pass --split or --epsilon".into())),
    };
    let config = NoiseConfig::new(args.mode.into(), split);
    let noisy = noise_tree(&tree, &config, &mut seeded_stream(args.seed, 0))?;
    let estimate = tree_post_process(&noisy)?;
    let mut out = String::from("node,parent,level,path,count,noisy,noisy_variance,estimate,estimate_variance\n");
    let topo = tree.topology();
    for v in 0..tree.len() {
        let parent = topo.parent(v).map_or(-1, |p| p as i64);
        out.push_str(&format!(
            "{v},{parent},{},{},{},{},{},{},{}\n",
            topo.level(v),
            tree.path(v).join("|"),
            tree.count(v),
            noisy.values()[v],
            noisy.variances()[v],
            estimate.values()[v],
            estimate.variances()[v],
        ));
    }
    fs::write(&args.out, out)?;
    Ok(())
}

fn experiment_cmd(args: ExperimentArgs) -> Result<()> {
    let mut config: ExperimentConfig = read_config(&args.config)?;
    if let hierdp::experiment::DataSource::Dataset(spec) = &mut config.data {
        if spec.path.is_relative() {
            if let Some(dir) = args.config.parent() {
                spec.path = dir.join(&spec.path);
            }
        }
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(eps) = args.epsilons {
        config.epsilons = eps;
    }
    if let Some(taus) = args.taus {
        config.taus = taus;
    }
    if let Some(methods) = args.methods {
        config.methods = methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    }
    if args.per_group {
        config.per_group = true;
    }
    if args.no_per_group {
        config.per_group = false;
    }
    if args.paired {
        config.paired = true;
    }
    if let Some(out) = args.out {
        config.output = Some(out);
    }
    let results = run_experiment(&config)?;
    let mut csv = Vec::new();
    results.write_csv(&mut csv)?;
    let meta = serde_json::to_value(&results.metadata)?;
    match &config.output {
        Some(path) => {
            fs::write(path, &csv)?;
            write_json(&sibling_path(path, ".meta.json"), &meta)?;
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    if matches!(config.prior, PriorSource::True) && config.methods.iter().any(|m| m.needs_prior()) {
        eprintln!("note: greedy splits used the true counts; the released results are not private");
    }
    eprintln!(
        "{} rows, {} units, {} eval records",
        results.rows.len(),
        results.metadata.units.len(),
        results.metadata.eval_records
    );
    Ok(())
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => read_config::<SyntheticSpec>(path)?,
        None => SyntheticSpec::benchmark(0),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    fs::write(&args.out, hierdp::generate_synthetic(&spec)?)?;
    let file_name = args.out.file_name().map(PathBuf::from).unwrap_or_default();
    write_json(&sibling_path(&args.out, ".dataset.json"), &serde_json::to_value(spec.dataset_spec(file_name))?)?;
    write_json(&sibling_path(&args.out, ".synth.json"), &serde_json::to_value(&spec)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildTree(a) => build_tree_cmd(a),
        Command::Budget(a) => budget_cmd(a),
        Command::Postprocess(a) => postprocess_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.category() {
                ErrorCategory::Config => ExitCode::from(2),
                ErrorCategory::Data => ExitCode::from(3),
                ErrorCategory::Internal => ExitCode::from(1),
            }
        }
    }
}
