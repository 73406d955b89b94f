//! `l3`: build graphs, generate datasets, train models, and run the
//! numerical verification suites.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use l3net::config::ExperimentConfig;
use l3net::data::{
    self, add_gaussian_noise, add_missing_values, add_permutation_noise, gen_updown, Split,
    UpDownConfig, UpDownGraph,
};
use l3net::graph::Graph;
use l3net::train::{
    self, evaluate, run_result, run_table, write_metrics_csv, Checkpoint, SweepSpec,
};
use l3net::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "l3", about = "Low-rank local graph filters toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Graph utilities
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Generate the up/down-wind dataset into binary containers
    GenUpdown(GenUpdownArgs),
    /// Ingest MNIST IDX files, downsample, add noise, write containers
    PrepMnist(PrepMnistArgs),
    /// Train a model from a config file
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Run a config x seed sweep and tabulate results
    Sweep(SweepArgs),
    /// Run a verification suite and print a JSON report
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Build a named graph and print (or save) its text form
    Build(GraphBuildArgs),
}

#[derive(Args)]
struct GraphBuildArgs {
    /// ring | chain | grid
    #[arg(long)]
    kind: String,
    /// Node count for rings and chains
    #[arg(long)]
    n: Option<usize>,
    /// Grid height
    #[arg(long)]
    h: Option<usize>,
    /// Grid width
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenUpdownArgs {
    /// ring | chain
    #[arg(long, default_value = "ring")]
    graph: String,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 5000)]
    n_test: usize,
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = 1.5)]
    std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
}

#[derive(Args)]
struct PrepMnistArgs {
    /// Directory holding train-images-idx3-ubyte etc.
    #[arg(long)]
    dir: PathBuf,
    /// Downsampling factor (1, 2, or 4)
    #[arg(long, default_value_t = 4)]
    factor: usize,
    /// none | gaussian | missing | permutation
    #[arg(long, default_value = "none")]
    noise: String,
    #[arg(long)]
    std: Option<f64>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the regularization weight
    #[arg(long)]
    reg_lambda: Option<f64>,
    /// Output directory for metrics.csv, result.json, checkpoints
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset container path, or a config file whose test split is used
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// reductions | expressiveness | equivariance | stability | strong-reg
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Graph { command } => match command {
            GraphCommand::Build(args) => graph_build(args),
        },
        Command::GenUpdown(args) => gen_updown_cmd(args),
        Command::PrepMnist(args) => prep_mnist(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::Verify(args) => verify_cmd(args),
    }
}

fn graph_build(args: GraphBuildArgs) -> Result<()> {
    let g = match args.kind.as_str() {
        "ring" => Graph::ring(args.n.context("--n is required for rings")?)?,
        "chain" => Graph::chain(args.n.context("--n is required for chains")?)?,
        "grid" => Graph::grid(
            args.h.context("--h is required for grids")?,
            args.w.context("--w is required for grids")?,
        )?,
        other => bail!("unknown graph kind `{other}` (expected ring|chain|grid)"),
    };
    let text = g.to_text();
    match args.out {
        Some(path) => {
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn write_container(path: &Path, set: &data::LabeledGraphSignalSet) -> Result<()> {
    let mut f = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    data::write_dataset(&mut f, set)?;
    f.flush()?;
    Ok(())
}

fn gen_updown_cmd(args: GenUpdownArgs) -> Result<()> {
    let graph = match args.graph.as_str() {
        "ring" => UpDownGraph::Ring,
        "chain" => UpDownGraph::Chain,
        other => bail!("unknown graph `{other}` (expected ring|chain)"),
    };
    let cfg = UpDownConfig {
        graph,
        n: args.n,
        n_train: args.n_train,
        n_test: args.n_test,
        threshold: args.threshold,
        std: args.std,
        seed: args.seed,
    };
    let (train, test) = gen_updown(&cfg);
    write_container(&args.out_train, &train)?;
    write_container(&args.out_test, &test)?;
    eprintln!(
        "wrote {} train and {} test samples on {:?}({})",
        train.len(),
        test.len(),
        graph,
        args.n
    );
    Ok(())
}

fn prep_mnist(args: PrepMnistArgs) -> Result<()> {
    let load = |img: &str, lbl: &str| -> Result<data::MnistData> {
        let mut images = BufReader::new(
            File::open(args.dir.join(img))
                .with_context(|| format!("opening {}", args.dir.join(img).display()))?,
        );
        let mut labels = BufReader::new(File::open(args.dir.join(lbl))?);
        Ok(data::load_mnist_idx(&mut images, &mut labels)?)
    };
    let mut train_raw = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let mut test_raw = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    if args.factor > 1 {
        train_raw = data::downsample(&train_raw, args.factor)?;
        test_raw = data::downsample(&test_raw, args.factor)?;
    }
    let side = train_raw.rows;
    let mut train = data::mnist_to_signals(&train_raw, Split::Train, "mnist");
    let mut test = data::mnist_to_signals(&test_raw, Split::Test, "mnist");
    match args.noise.as_str() {
        "none" => {}
        "gaussian" => {
            let std = args.std.context("--std is required for gaussian noise")?;
            let (noisy, psnr) = add_gaussian_noise(&train, std, args.seed)?;
            train = noisy;
            let (noisy, psnr_test) = add_gaussian_noise(&test, std, args.seed + 1)?;
            test = noisy;
            eprintln!("gaussian std {std}: train psnr {psnr:.2} dB, test psnr {psnr_test:.2} dB");
        }
        "missing" => {
            let level = args.level.context("--level is required for missing noise")?;
            train = add_missing_values(&train, level, args.seed)?;
            test = add_missing_values(&test, level, args.seed + 1)?;
        }
        "permutation" => {
            train = add_permutation_noise(&train, side, side, args.seed)?;
            test = add_permutation_noise(&test, side, side, args.seed + 1)?;
        }
        other => bail!("unknown noise kind `{other}`"),
    }
    write_container(&args.out_train, &train)?;
    write_container(&args.out_test, &test)?;
    eprintln!(
        "wrote {} train / {} test samples at {side}x{side}",
        train.len(),
        test.len()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lambda) = args.reg_lambda {
        if lambda < 0.0 {
            bail!("--reg-lambda must be non-negative");
        }
        cfg.reg_lambda = lambda;
    }
    let out = train::train(&cfg)?;
    for m in &out.history {
        eprintln!(
            "epoch {:>4}: train_loss {:.5} train_acc {:.4} eval_acc {:.4} reg {:.5} lr {:.2e}",
            m.epoch, m.train_loss, m.train_acc, m.eval_acc, m.reg_value, m.lr
        );
    }
    println!(
        "best eval accuracy {:.4} (config {:016x})",
        out.best_eval_acc,
        cfg.hash()
    );
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir)?;
        let mut f = File::create(dir.join("metrics.csv"))?;
        write_metrics_csv(&mut f, &out.history)?;
        let result = run_result(&out);
        std::fs::write(
            dir.join("result.json"),
            serde_json::to_string_pretty(&result)?,
        )?;
        let mut f = BufWriter::new(File::create(dir.join("best.ckpt"))?);
        out.best.save(&mut f)?;
        f.flush()?;
        let mut f = BufWriter::new(File::create(dir.join("last.ckpt"))?);
        out.last.save(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let mut f = BufReader::new(
        File::open(&args.checkpoint)
            .with_context(|| format!("opening {}", args.checkpoint.display()))?,
    );
    let ckpt = Checkpoint::load(&mut f)?;
    let (_cfg, mut model) = ckpt.restore_model()?;

    // the data argument is either a dataset container or a config file
    let mut probe = [0u8; 8];
    let mut fh = File::open(&args.data)?;
    let got = fh.read(&mut probe)?;
    drop(fh);
    let set = if got == 8 && &probe == b"L3DSET01" {
        let mut f = BufReader::new(File::open(&args.data)?);
        data::read_dataset(&mut f)?
    } else {
        let text = std::fs::read_to_string(&args.data)?;
        let data_cfg = ExperimentConfig::parse(&text)?;
        train::load_dataset(&data_cfg)?.1
    };
    let (acc, loss) = evaluate(&mut model, &set, args.batch_size)?;
    println!("accuracy {acc:.4} mean_loss {loss:.5} samples {}", set.len());
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let base = args
        .spec
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let spec = SweepSpec::parse(&text, &base)?;
    let rows = run_table(&spec, args.out.as_deref())?;
    println!("name,mean,std,accs");
    for row in &rows {
        let accs = row
            .accs
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect::<Vec<_>>()
            .join(";");
        println!("{},{:.4},{:.4},{}", row.name, row.mean, row.std, accs);
    }
    Ok(())
}

fn verify_cmd(args: VerifyArgs) -> Result<()> {
    let suite =
        Suite::parse(&args.suite).with_context(|| format!("unknown suite `{}`", args.suite))?;
    let report = run_suite(suite, args.trials, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.pass {
        std::process::exit(1);
    }
    Ok(())
}
