use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use curvprop::experiment::{emit_outputs, run_accuracy_experiment, synthetic_data, ExperimentConfig, Metric};
use curvprop::format::{load_graph, parse_numbers};
use curvprop::mlp::{save_checkpoint, train_sgd};
use curvprop::{
    draw_rng, estimate, exact_hessian, CurvatureMask, Estimator, EstimatorConfig, Mlp, NoiseDist, Nonlinearity,
    Target,
};

#[derive(Parser)]
#[command(name = "curvprop", version, about = "Stochastic Hessian estimates by curvature propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the diagonal-accuracy experiment and write results.csv and accuracy.svg.
    Experiment(ExperimentArgs),
    /// Print the exact Hessian of a graph file at a point.
    Hessian(HessianArgs),
    /// Print a stochastic Hessian estimate for a graph file at a point.
    Estimate(EstimateArgs),
    /// Write a randomly initialised (optionally trained) network checkpoint.
    InitNet(InitNetArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// key = value config file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Override one config key, e.g. `--set samples=1,10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PointArgs {
    /// Graph text file.
    #[arg(long)]
    graph: PathBuf,
    /// Evaluation point: comma separated numbers or @file.
    #[arg(long)]
    at: String,
}

#[derive(Args)]
struct HessianArgs {
    #[command(flatten)]
    point: PointArgs,
    /// Print only the diagonal.
    #[arg(long)]
    diagonal: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    point: PointArgs,
    /// S, TU, TU-sym, Simple or GN-S.
    #[arg(long, default_value = "S")]
    estimator: String,
    /// binary or gaussian.
    #[arg(long, default_value = "binary")]
    noise: NoiseDist,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Estimate the full matrix instead of the diagonal.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InitNetArgs {
    /// Layer sizes, e.g. 256,20,20,20,10.
    #[arg(long, default_value = "256,20,20,20,10")]
    sizes: String,
    #[arg(long, default_value = "tanh")]
    activation: String,
    #[arg(long, default_value_t = 0.01)]
    variance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// SGD epochs on the synthetic experiment batch for this seed.
    #[arg(long, default_value_t = 0)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 20)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Bad configuration; exits with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn set_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn load_config(args: &ExperimentArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let mut set = |k: &str, v: &str, origin: &str| {
        config
            .set(k, v)
            .map_err(|msg| config_error(format!("{origin}: {msg}")))
    };
    if let Some(seed) = args.seed {
        set("seed", &seed.to_string(), "--seed")?;
    }
    if let Some(out) = &args.out {
        set("out", &out.to_string_lossy(), "--out")?;
    }
    if let Some(threads) = args.threads {
        set("threads", &threads.to_string(), "--threads")?;
    }
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(config_error(format!("--set {o}: expected KEY=VALUE")));
        };
        set(k.trim(), v.trim(), &format!("--set {o}"))?;
    }
    config.validate().map_err(config_error)?;
    Ok(config)
}

fn experiment(args: ExperimentArgs) -> anyhow::Result<()> {
    let config = load_config(&args)?;
    set_threads(config.threads)?;
    let run = run_accuracy_experiment(&config)?;
    emit_outputs(&run, &config)?;

    println!("parameters: {}", run.param_count);
    if let Some(last) = run.train_losses.last() {
        println!("training loss after {} epochs: {last}", run.train_losses.len());
    }
    for (stage, secs) in &run.stages {
        println!("{stage}: {secs:.2}s");
    }
    println!(
        "{:<12} {:<9} {:>7} {:>12} {:>12} {:>9}",
        "estimator",
        "noise",
        "samples",
        Metric::RelL2.name(),
        Metric::SqRelL2.name(),
        "seconds"
    );
    for r in &run.rows {
        println!(
            "{:<12} {:<9} {:>7} {:>12.4e} {:>12.4e} {:>9.2}",
            r.series.method.name(),
            r.series.noise_name(),
            r.samples,
            r.value(Metric::RelL2),
            r.value(Metric::SqRelL2),
            r.wall_seconds
        );
    }
    println!("wrote {}", config.out.join("results.csv").display());
    Ok(())
}

fn read_point(spec: &str, graph_path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = match spec.strip_prefix('@') {
        Some(file) => {
            let path = graph_path.parent().unwrap_or(Path::new(".")).join(file);
            let path = if Path::new(file).is_absolute() || !path.exists() {
                PathBuf::from(file)
            } else {
                path
            };
            std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?
        }
        None => spec.to_string(),
    };
    parse_numbers(&text).map_err(|e| anyhow::anyhow!("--at: {e}"))
}

fn hessian(args: HessianArgs) -> anyhow::Result<()> {
    let parsed = load_graph(&args.point.graph)?;
    let y = read_point(&args.point.at, &args.point.graph)?;
    let h = exact_hessian(&parsed.graph, &y)?;
    if args.diagonal {
        for d in h.diagonal() {
            println!("{d}");
        }
    } else {
        let m = h.matrix();
        for r in 0..m.nrows() {
            let row: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
            println!("{}", row.join(","));
        }
    }
    Ok(())
}

fn estimate_cmd(args: EstimateArgs) -> anyhow::Result<()> {
    set_threads(args.threads)?;
    let Some(estimator) = Estimator::parse(&args.estimator) else {
        bail!("unknown estimator '{}'", args.estimator);
    };
    let parsed = load_graph(&args.point.graph)?;
    let y = read_point(&args.point.at, &args.point.graph)?;
    let target = if args.full { Target::Full } else { Target::Diagonal };
    let config = EstimatorConfig::new(estimator, args.noise)
        .samples(args.samples)
        .target(target)
        .seed(args.seed)
        .mask(CurvatureMask::Full);
    let est = estimate(&parsed.graph, &y, &config)?;
    let n = y.len();
    println!("i,j,estimate,variance");
    for (k, (m, v)) in est.mean.iter().zip(&est.variance).enumerate() {
        let (i, j) = if args.full { (k / n, k % n) } else { (k, k) };
        println!("{i},{j},{m},{v}");
    }
    Ok(())
}

fn init_net(args: InitNetArgs) -> anyhow::Result<()> {
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .with_context(|| format!("--sizes: cannot parse '{}'", args.sizes))?;
    let Some(act) = Nonlinearity::parse(&args.activation) else {
        bail!("unknown activation '{}'", args.activation);
    };
    let mut mlp = Mlp::random(&sizes, act, args.variance, &mut draw_rng(args.seed, u64::MAX))?;
    if args.epochs > 0 {
        let (x, t) = synthetic_data(&sizes, args.cases, args.seed);
        let losses = train_sgd(
            &mut mlp,
            &x,
            &t,
            args.epochs,
            args.learning_rate,
            args.batch,
            &mut draw_rng(args.seed, u64::MAX - 2),
        )?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            println!("loss {first} -> {last} over {} epochs", losses.len());
        }
    }
    save_checkpoint(&mlp, &args.out)?;
    println!("wrote {} ({} parameters)", args.out.display(), mlp.param_count());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Experiment(a) => experiment(a),
        Command::Hessian(a) => hessian(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::InitNet(a) => init_net(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
