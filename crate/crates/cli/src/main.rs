use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaflow::experiment::{
    build_report, checkpoint_name, evaluate_runs, generate, log_name, sweep, train_run, Checkpoints,
    ExperimentConfig, ExperimentError, Method, NodePrediction, SweepAxis, SweepRow,
};
use metaflow::gnn::GraphUNet;
use metaflow::graphdata::{dataset_hash, load_dataset, save_dataset, summarize_dataset, MetaDataset};
use metaflow::meta::LogRow;

/// Meta-learned graph surrogates for airfoil flow.
///
/// Every configuration key can be given in the config file as `key = value`
/// or on the command line as `--key value` after the subcommand options.
#[derive(Parser)]
#[command(name = "metaflow", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the meta-train and meta-test tasks into `data_dir`.
    Generate {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Train one method for every configured seed and fold.
    Train {
        #[arg(long, value_parser = ["maml", "baseline"])]
        method: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Adapt and score every method on the three meta-test sets.
    Evaluate {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// RMSE curves over gradient updates or adaptation set size.
    Sweep {
        #[arg(long, value_parser = ["gradient_updates", "n_examples"])]
        axis: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Print the manifest summary of a dataset.
    Inspect {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| ExperimentError::Config(format!("expected --key, got {a:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let v = it
            .next()
            .ok_or_else(|| ExperimentError::Config(format!("--{key} needs a value")))?;
        out.push((key.replace('-', "_"), v.clone()));
    }
    Ok(out)
}

fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut pairs = match file {
        Some(p) => ExperimentConfig::parse_text(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => Vec::new(),
    };
    pairs.extend(parse_overrides(overrides)?);
    ExperimentConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

fn open_data(cfg: &ExperimentConfig) -> Result<MetaDataset> {
    Ok(load_dataset(&cfg.data_dir)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_all(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let data = generate(cfg, &|m| eprintln!("{m}"))?;
    save_dataset(&data, &cfg.data_dir)?;
    let s = summarize_dataset(&cfg.data_dir)?;
    println!(
        "wrote {} tasks ({} cases) to {}",
        data.tasks.len(),
        data.total_cases(),
        cfg.data_dir.display()
    );
    for (set, n) in &s.tasks_per_set {
        println!("  {}: {n} tasks, {} cases", set.name(), s.cases_per_set[set]);
    }
    println!("manifest sha256 {}", dataset_hash(&cfg.data_dir)?);
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, method: Method) -> Result<()> {
    let data = open_data(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    write_all(&cfg.out_dir.join(format!("{}_config.txt", method.name())), &cfg.to_text())?;
    for &seed in &cfg.seeds {
        for &fold in &cfg.folds {
            let log_path = cfg.out_dir.join(log_name(method, seed, fold));
            let fresh = !log_path.exists();
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(io_err(&log_path))?;
            let mut log = BufWriter::new(file);
            let mut io_failure = None;
            if fresh {
                writeln!(log, "{}", LogRow::HEADER).map_err(io_err(&log_path))?;
            }
            let mut last: Option<LogRow> = None;
            let out = train_run(cfg, &data, method, seed, fold, |rows| {
                for r in rows {
                    if let Err(e) = writeln!(log, "{}", r.csv()) {
                        io_failure.get_or_insert(e);
                    }
                }
                last = rows.last().cloned();
            })?;
            log.flush().map_err(io_err(&log_path))?;
            if let Some(e) = io_failure {
                return Err(io_err(&log_path)(e));
            }
            let ckpt = cfg.out_dir.join(checkpoint_name(method, seed, fold));
            out.model.save(&ckpt)?;
            match (&out.error, last) {
                (Some(e), _) => {
                    eprintln!("{} seed {seed} fold {fold}: {e}; saved last good state", method.name());
                    return Err(ExperimentError::Meta(out.error.unwrap()));
                }
                (None, Some(r)) => println!(
                    "{} seed {seed} fold {fold}: epoch {} loss {:.6e} -> {}",
                    method.name(),
                    r.epoch,
                    r.loss,
                    ckpt.display()
                ),
                (None, None) => println!(
                    "{} seed {seed} fold {fold}: no epochs, saved initialization -> {}",
                    method.name(),
                    ckpt.display()
                ),
            }
        }
    }
    Ok(())
}

fn load_checkpoints(cfg: &ExperimentConfig) -> Result<Checkpoints> {
    let mut models = Checkpoints::new();
    for &seed in &cfg.seeds {
        for &fold in &cfg.folds {
            for method in [Method::Maml, Method::Baseline] {
                let path = cfg.out_dir.join(checkpoint_name(method, seed, fold));
                if !path.exists() {
                    return Err(io_err(&path)(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "missing checkpoint",
                    )));
                }
                let m = GraphUNet::load(&path)?;
                if m.config != cfg.model {
                    return Err(ExperimentError::Config(format!(
                        "{} was trained with a different model configuration",
                        path.display()
                    )));
                }
                models.insert((method, seed, fold), m);
            }
        }
    }
    Ok(models)
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let data = open_data(cfg)?;
    let hash = dataset_hash(&cfg.data_dir)?;
    let models = load_checkpoints(cfg)?;
    let pred_path = cfg.out_dir.join("predictions.csv");
    let mut pred_out = if cfg.write_predictions {
        let mut w = create(&pred_path)?;
        writeln!(w, "{}", NodePrediction::HEADER).map_err(io_err(&pred_path))?;
        Some(w)
    } else {
        None
    };
    let mut pred_err = None;
    let mut sink = |p: &NodePrediction| {
        if let Some(w) = pred_out.as_mut() {
            if let Err(e) = writeln!(w, "{}", p.csv()) {
                pred_err.get_or_insert(e);
            }
        }
    };
    let evals = evaluate_runs(
        cfg,
        &data,
        &models,
        cfg.n_examples,
        cfg.n_updates,
        if cfg.write_predictions {
            Some(&mut sink)
        } else {
            None
        },
    )?;
    if let Some(mut w) = pred_out {
        w.flush().map_err(io_err(&pred_path))?;
    }
    if let Some(e) = pred_err {
        return Err(io_err(&pred_path)(e));
    }
    let evals_path = cfg.out_dir.join("evals.csv");
    let mut w = create(&evals_path)?;
    let mut text = String::from("set,method,seed,fold,task_id,n_examples,n_updates,rmse\n");
    for e in &evals {
        text += &format!(
            "{},{},{},{},{},{},{},{:e}\n",
            e.set.name(),
            e.method.name(),
            e.seed,
            e.fold,
            e.task_id,
            e.n_examples,
            e.curve.len() - 1,
            e.rmse()
        );
    }
    w.write_all(text.as_bytes()).map_err(io_err(&evals_path))?;
    w.flush().map_err(io_err(&evals_path))?;
    let report = build_report(cfg, &evals, hash, cfg.n_examples, cfg.n_updates);
    write_all(&cfg.out_dir.join("report.csv"), &report.csv())?;
    let rendered = report.render();
    write_all(&cfg.out_dir.join("report.txt"), &format!("{rendered}\n{}", cfg.to_text()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_all(&cfg.out_dir.join("report.json"), &json)?;
    print!("{rendered}");
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<()> {
    let data = open_data(cfg)?;
    let models = load_checkpoints(cfg)?;
    let (name, grid) = match axis {
        SweepAxis::GradientUpdates => ("gradient_updates", (0..=cfg.sweep_updates).collect::<Vec<_>>()),
        SweepAxis::NExamples => ("n_examples", cfg.sweep_examples.clone()),
    };
    let rows = sweep(cfg, &data, &models, axis, &grid)?;
    let path = cfg.out_dir.join(format!("sweep_{name}.csv"));
    let mut text = format!("{}\n", SweepRow::HEADER);
    for r in &rows {
        text += &r.csv();
        text.push('\n');
    }
    write_all(&path, &text)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_inspect(cfg: &ExperimentConfig) -> Result<()> {
    let s = summarize_dataset(&cfg.data_dir)?;
    println!("dataset {}", cfg.data_dir.display());
    println!("format version {}", s.version);
    println!("seed {}", s.seed);
    println!("stored fold {}", s.fold);
    println!("total cases {}", s.total_cases);
    for (set, n) in &s.tasks_per_set {
        println!("{}: {n} tasks, {} cases", set.name(), s.cases_per_set[set]);
    }
    println!("manifest sha256 {}", dataset_hash(&cfg.data_dir)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Generate { overrides } => cmd_generate(&load_config(file, &overrides)?),
        Command::Train { method, overrides } => cmd_train(&load_config(file, &overrides)?, Method::parse(&method)?),
        Command::Evaluate { overrides } => cmd_evaluate(&load_config(file, &overrides)?),
        Command::Sweep { axis, overrides } => cmd_sweep(&load_config(file, &overrides)?, SweepAxis::parse(&axis)?),
        Command::Inspect { overrides } => cmd_inspect(&load_config(file, &overrides)?),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("METAFLOW_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ExperimentError::Config(format!("METAFLOW_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
