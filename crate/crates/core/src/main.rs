use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dynamic_isp::controller::controller_graph;
use dynamic_isp::gradsuite::{self, DEFAULT_EPS, DEFAULT_INSTANCES, OPS};
use dynamic_isp::io::{
    load_image, save_image, write_metrics_jsonl, Checkpoint, Config, ImageFormat,
};
use dynamic_isp::isp::apply_pipeline_flat;
use dynamic_isp::ndiff::{flop_count, OpDesc, Tensor};
use dynamic_isp::synth::generate_sequences;
use dynamic_isp::trainer::ablation::{AblationSettings, Suite};
use dynamic_isp::trainer::{
    datasets, evaluate, grid_search_gamma, simple_gamma, validation_split, EvalMode, Frontend,
    Model, Trainer,
};
use dynamic_isp::{Error, Result};

/// Relative-error bound a gradient check must stay under.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "dynisp",
    version,
    about = "Differentiable ISP with a feedback parameter controller"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcessMode {
    /// Static operating point from the config or checkpoint.
    Static,
    /// Controller prediction from the frame itself, then reprocess.
    Twice,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalArg {
    Twice,
    Sequential,
}

#[derive(Subcommand)]
enum Cmd {
    /// Apply the ISP to one image or every image in a directory.
    Process {
        #[arg(
            long,
            conflicts_with = "checkpoint",
            required_unless_present = "checkpoint"
        )]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "static")]
        mode: ProcessMode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Output format; defaults to the input's.
        #[arg(long)]
        format: Option<String>,
    },
    /// Train the dynamic (or static) model and write a checkpoint.
    Train(TrainArgs),
    /// Train static ISP parameters jointly with the recognizer.
    TuneStatic(TrainArgs),
    /// Simple-gamma grid search with one recognizer per grid point.
    GridSearch {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter to sweep; only the simple gamma is supported.
        #[arg(long, default_value = "g1")]
        param: String,
        /// `lo:hi:n`, inclusive, evenly spaced.
        #[arg(long)]
        range: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy of a checkpoint on the test split or on ordered streams.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "twice")]
        mode: EvalArg,
        /// Streams and frames per stream for sequential data, `n:len`.
        #[arg(long, default_value = "200:10")]
        sequences: String,
    },
    /// Finite-difference audit of every differentiable block.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
    },
    /// Controller and ISP FLOP counts.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Directional reproduction of an ablation table at desk scale.
    Ablate {
        #[arg(long)]
        table: u8,
        /// Comma-separated seeds; defaults to 0,1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// Metric log, one JSON object per epoch.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Overrides `trainer.seed` and `synth.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    resume: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.trainer.seed = s;
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    info!("seed {}", cfg.trainer.seed);
    info!("resolved config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model> {
    let t = Checkpoint::load(path)?.into_trainer()?;
    info!("seed {}", t.model.config.trainer.seed);
    info!(
        "resolved config: {}",
        serde_json::to_string(&t.model.config)?
    );
    Ok(t.model)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ImageFormat::from_path(p).is_ok())
        .collect();
    out.sort();
    Ok(out)
}

fn process(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    mode: ProcessMode,
    input: &Path,
    output: &Path,
    format: Option<&str>,
) -> Result<()> {
    let model = match checkpoint {
        Some(k) => load_model(k)?,
        None => {
            let mut cfg = load_config(config, None)?;
            cfg.controller.enabled = false;
            Model::new(cfg)?
        }
    };
    let apply = |x: &Tensor| -> Result<Tensor> {
        let p = match mode {
            ProcessMode::Static => model.static_point()?,
            ProcessMode::Twice => {
                if model.frontend != Frontend::Dynamic {
                    return Err(Error::Config(
                        "twice mode needs a dynamic checkpoint".into(),
                    ));
                }
                model.predict_params(x, &model.inference_initial()?)?
            }
        };
        info!("parameters {p:?}");
        let y = apply_pipeline_flat(x, &model.config.pipeline, &p)?.output;
        if !y.all_finite() {
            return Err(Error::Numeric("ISP output is not finite".into()));
        }
        Ok(y)
    };
    let pairs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        std::fs::create_dir_all(output)?;
        image_files(input)?
            .into_iter()
            .map(|p| {
                let o = output.join(p.file_name().expect("file"));
                (p, o)
            })
            .collect()
    } else {
        vec![(input.to_path_buf(), output.to_path_buf())]
    };
    for (i, o) in pairs {
        let in_fmt = ImageFormat::from_path(&i)?;
        let out_fmt = match format {
            Some(f) => ImageFormat::parse(f)?,
            None => in_fmt,
        };
        let y = apply(&load_image(&i, in_fmt)?)?;
        save_image(&o, &y, out_fmt)?;
        info!("{} -> {}", i.display(), o.display());
    }
    Ok(())
}

fn train(args: &TrainArgs, static_only: bool) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(k) => {
            let t = Checkpoint::load(k)?.into_trainer()?;
            info!("resuming at phase {} epoch {}", t.phase, t.epoch);
            info!("seed {}", t.model.config.trainer.seed);
            info!(
                "resolved config: {}",
                serde_json::to_string(&t.model.config)?
            );
            t
        }
        None => {
            let mut cfg = load_config(args.config.as_deref(), args.seed)?;
            if static_only {
                cfg.controller.enabled = false;
            }
            Trainer::new(Model::new(cfg)?)
        }
    };
    let (train_set, test_set) = datasets(&trainer.model.config)?;
    trainer.fit_with(&train_set, |t| {
        let m = t.metrics.last().expect("epoch ran");
        info!(
            "phase {} epoch {}: loss {:.4} train acc {:.4}",
            m.phase, m.epoch, m.loss, m.accuracy
        );
        Checkpoint::from_trainer(t).save(&args.out)?;
        if let Some(path) = &args.metrics {
            write_metrics_jsonl(path, &t.metrics)?;
        }
        Ok(())
    })?;
    Checkpoint::from_trainer(&trainer).save(&args.out)?;
    if let Some(path) = &args.metrics {
        write_metrics_jsonl(path, &trainer.metrics)?;
    }
    let acc = evaluate(&trainer.model, &test_set, EvalMode::Twice)?.accuracy;
    println!("test accuracy {acc:.4}");
    if trainer.model.frontend != Frontend::Bypass {
        println!("static point {:?}", trainer.model.static_point()?);
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("range `{s}` is not lo:hi:n"));
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        return Err(bad());
    };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi: f64 = hi.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    match n {
        0 => Err(Error::Config("grid needs at least one point".into())),
        1 => Ok(vec![lo]),
        _ => Ok((0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()),
    }
}

fn grid_search(config: Option<&Path>, param: &str, range: &str, seed: Option<u64>) -> Result<()> {
    if !matches!(param, "g1" | "gamma") {
        return Err(Error::Config(format!(
            "grid search sweeps the simple gamma (`g1`), not `{param}`"
        )));
    }
    let grid = parse_range(range)?;
    let cfg = load_config(config, seed)?;
    let (train_set, test_set) = datasets(&cfg)?;
    let val_set = validation_split(&cfg)?;
    let (res, t) = grid_search_gamma(&grid, &cfg, &train_set, &val_set)?;
    for (g, acc) in &res.scores {
        println!("gamma {g:.4}  validation accuracy {acc:.4}");
    }
    let te = test_set.map_images(|x| simple_gamma(x, res.best));
    let acc = evaluate(&t.model, &te, EvalMode::Twice)?.accuracy;
    println!("best gamma {}  test accuracy {acc:.4}", res.best);
    Ok(())
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("`{s}` is not n:len"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

fn eval(checkpoint: &Path, mode: EvalArg, sequences: &str) -> Result<()> {
    let model = load_model(checkpoint)?;
    let report = match mode {
        EvalArg::Twice => {
            let (_, test_set) = datasets(&model.config)?;
            evaluate(&model, &test_set, EvalMode::Twice)?
        }
        EvalArg::Sequential => {
            let (n, len) = parse_pair(sequences)?;
            let mut scfg = model.config.synth.clone();
            scfg.seed = scfg.seed.wrapping_add(1 << 20);
            evaluate(
                &model,
                &generate_sequences(&scfg, n, len)?,
                EvalMode::Sequential,
            )?
        }
    };
    println!("accuracy {:.4}", report.accuracy);
    Ok(())
}

fn gradcheck(op: Option<&str>, seed: u64, instances: usize) -> Result<()> {
    let ops: Vec<&str> = match op {
        Some(o) => vec![o],
        None => OPS.to_vec(),
    };
    info!("seed {seed}");
    info!(
        "resolved config: {}",
        serde_json::json!({ "ops": ops, "instances": instances, "eps": DEFAULT_EPS, "tolerance": GRADCHECK_TOL })
    );
    let mut failed = Vec::new();
    for name in ops {
        let r = gradsuite::check_named(name, instances, DEFAULT_EPS, seed)?;
        let ok = r.max_rel_err < GRADCHECK_TOL;
        println!(
            "{:<30} {:>4} instances  max rel err {:.3e}  resampled {:>3}  {}",
            r.op,
            r.instances,
            r.max_rel_err,
            r.resampled,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn flops(config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, None)?;
    let feat = cfg.surrogate.feature_shape();
    let sfb = flop_count(&dynamic_isp::controller::sfb_graph(&cfg.controller, feat));
    println!("feature branch         {sfb}");
    for (l, s) in cfg.pipeline.stages.iter().enumerate() {
        let head = flop_count(&dynamic_isp::controller::head_graph(
            &cfg.controller,
            s.kind.param_count(),
        ));
        let pixels = (cfg.synth.size * cfg.synth.size) as u64;
        let isp = flop_count(&[OpDesc::Isp {
            isp: s.kind,
            pixels,
        }]);
        println!(
            "stage {l} {:<3} controller {head}  ISP {isp} ({}x{})",
            s.kind.name(),
            cfg.synth.size,
            cfg.synth.size
        );
    }
    let total = flop_count(&controller_graph(&cfg.controller, &cfg.pipeline, feat));
    println!("controller total       {total}");
    Ok(())
}

fn ablate(table: u8, seeds: Option<Vec<u64>>) -> Result<()> {
    let mut settings = AblationSettings::desk();
    if let Some(s) = seeds {
        settings.seeds = s;
    }
    info!("seed {:?}", settings.seeds);
    info!("resolved config: {}", serde_json::to_string(&settings)?);
    let mut suite = Suite::new(settings)?;
    print!("{}", suite.by_number(table)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Process {
            config,
            checkpoint,
            mode,
            input,
            output,
            format,
        } => process(
            config.as_deref(),
            checkpoint.as_deref(),
            mode,
            &input,
            &output,
            format.as_deref(),
        ),
        Cmd::Train(a) => train(&a, false),
        Cmd::TuneStatic(a) => train(&a, true),
        Cmd::GridSearch {
            config,
            param,
            range,
            seed,
        } => grid_search(config.as_deref(), &param, &range, seed),
        Cmd::Eval {
            checkpoint,
            mode,
            sequences,
        } => eval(&checkpoint, mode, &sequences),
        Cmd::Gradcheck {
            op,
            seed,
            instances,
        } => gradcheck(op.as_deref(), seed, instances),
        Cmd::Flops { config } => flops(config.as_deref()),
        Cmd::Ablate { table, seeds } => ablate(table, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
