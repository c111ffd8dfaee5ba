//! `dreamif`: synthesize data, degrade images, train, fuse, evaluate and
//! export dominance maps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use dreamif_core::checkpoint;
use dreamif_core::dataio::{load_pair_dataset, load_png, matched_files, save_png, synth_pairs, synth_toy_dataset};
use dreamif_core::degradation::{self, DegradationKind, DegradationSpec};
use dreamif_core::imaging::Image;
use dreamif_core::metrics::{evaluate_pair, MetricReport};
use dreamif_core::model::{describe, Model, ModelConfig};
use dreamif_core::persist;
use dreamif_core::trainer::{self, TrainConfig, FINAL_CHECKPOINT, HISTORY_FILE};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dreamif", version, about = "Infrared/visible image fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired dataset to OUT/vis and OUT/ir.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one seeded degradation to a PNG.
    Degrade {
        #[arg(long = "in", value_name = "PNG")]
        input: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: DegradationKind,
        /// Gaussian std on the 0-255 scale.
        #[arg(long)]
        sigma: Option<f64>,
        /// Poisson photon-scale exponent in [2, 4].
        #[arg(long)]
        lam: Option<f64>,
        /// Speckle level on the 0-255 scale, in [2, 25].
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
    },
    /// Train from a JSON config; writes history and checkpoints.
    Train {
        #[arg(long, value_name = "JSON")]
        config: PathBuf,
        /// Dataset root with vis/ and ir/; overrides the config.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Output directory; overrides the config.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Fuse one pair with a trained checkpoint.
    Fuse {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG")]
        vis: PathBuf,
        #[arg(long, value_name = "PNG")]
        ir: PathBuf,
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Also write the eight dominance maps here.
        #[arg(long = "rd-dir", value_name = "DIR")]
        rd_dir: Option<PathBuf>,
    },
    /// Score a fused image, or every pair under ROOT/{fused,vis,ir}.
    #[command(group(ArgGroup::new("mode").required(true).args(["fused", "dir"])))]
    Eval {
        #[arg(long, value_name = "PNG", requires_all = ["vis", "ir"])]
        fused: Option<PathBuf>,
        #[arg(long, value_name = "PNG", requires = "fused")]
        vis: Option<PathBuf>,
        #[arg(long, value_name = "PNG", requires = "fused")]
        ir: Option<PathBuf>,
        #[arg(long, value_name = "ROOT")]
        dir: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        json: PathBuf,
    },
    /// Write the eight dominance maps of a pair as grayscale PNGs.
    Rdmaps {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG")]
        vis: PathBuf,
        #[arg(long, value_name = "PNG")]
        ir: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print a model configuration and its parameter count.
    #[command(group(ArgGroup::new("source").required(true).args(["config", "checkpoint"])))]
    Describe {
        #[arg(long, value_name = "JSON")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<DegradationKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = DegradationKind::ALL.iter().map(|k| k.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

enum Failure {
    Usage(String),
    Op(dreamif_core::Error),
}

impl From<dreamif_core::Error> for Failure {
    fn from(e: dreamif_core::Error) -> Self {
        Failure::Op(e)
    }
}

type CliResult = Result<(), Failure>;

fn write_json<T: Serialize>(value: &T, path: &Path) -> dreamif_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    persist::write_atomic(path, text.as_bytes())
}

fn read_json(path: &Path) -> dreamif_core::Result<serde_json::Value> {
    serde_json::from_slice(&persist::read(path)?)
        .map_err(|e| dreamif_core::Error::Format(format!("{}: {e}", path.display())))
}

fn synth(n: usize, size: usize, seed: u64, out: &Path) -> CliResult {
    let ds = synth_toy_dataset(n, size, seed, out)?;
    println!("wrote {} pairs to {}", ds.len(), out.display());
    Ok(())
}

fn degrade(input: &Path, spec: DegradationSpec, out: &Path) -> CliResult {
    spec.validate()?;
    let img = load_png(input)?;
    save_png(&degradation::apply(&img, &spec)?, out)?;
    Ok(())
}

fn train(config: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> CliResult {
    let mut cfg: TrainConfig = serde_json::from_value(read_json(config)?)
        .map_err(|e| dreamif_core::Error::Format(format!("{}: {e}", config.display())))?;
    if data.is_some() {
        cfg.data = data;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    let Some(out_dir) = cfg.out_dir.clone() else {
        return Err(Failure::Usage(
            "no output directory: pass --out or set out_dir in the config".into(),
        ));
    };
    cfg.validate()?;
    let pairs = match &cfg.data {
        Some(root) => load_pair_dataset(root, false)?.load_all()?,
        None => {
            log::info!("no dataset given; training on {} synthetic pairs", cfg.synth_pairs);
            synth_pairs(cfg.synth_pairs, cfg.synth_size, cfg.seed)?
                .into_iter()
                .map(|s| s.pair)
                .collect()
        }
    };
    persist::create_dir_all(&out_dir)?;
    write_json(&cfg, &out_dir.join("config.json"))?;
    let model = Model::new(cfg.model.clone())?;
    let (_, history) = trainer::train(model, &pairs, &cfg, Some(&out_dir))?;
    if let (Some(first), Some(last)) = (history.records.first(), history.records.last()) {
        println!(
            "trained {} steps on {} pairs: total loss {:.5} -> {:.5}",
            history.len(),
            pairs.len(),
            first.loss.total,
            last.loss.total
        );
    }
    println!(
        "wrote {} and {}",
        out_dir.join(HISTORY_FILE).display(),
        out_dir.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn write_rd_maps(result: &dreamif_core::model::ForwardResult, dir: &Path) -> dreamif_core::Result<()> {
    persist::create_dir_all(dir)?;
    for m in &result.rd_maps {
        let img = Image::new(1, m.height, m.width, m.weights.clone())?;
        save_png(&img, &dir.join(format!("rd_{}_L{}.png", m.modality.tag(), m.level)))?;
    }
    Ok(())
}

fn run_model(checkpoint_path: &Path, vis: &Path, ir: &Path) -> dreamif_core::Result<dreamif_core::model::ForwardResult> {
    let model = checkpoint::load(checkpoint_path)?;
    model.forward(&load_png(vis)?, &load_png(ir)?)
}

fn fuse(ckpt: &Path, vis: &Path, ir: &Path, out: &Path, rd_dir: Option<&Path>) -> CliResult {
    let result = run_model(ckpt, vis, ir)?;
    save_png(&result.fused, out)?;
    if let Some(dir) = rd_dir {
        write_rd_maps(&result, dir)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PairReport {
    id: String,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Serialize)]
struct BatchReport {
    count: usize,
    mean: MetricReport,
    pairs: Vec<PairReport>,
}

fn eval_dir(root: &Path, json: &Path) -> CliResult {
    let names = matched_files(root, &["fused", "vis", "ir"], false)?;
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let [f, v, i] = ["fused", "vis", "ir"].map(|sub| load_png(&root.join(sub).join(name)));
        let report = evaluate_pair(&f?, &v?, &i?)?;
        let id = Path::new(name).file_stem().map_or(name.clone(), |s| s.to_string_lossy().into_owned());
        pairs.push(PairReport { id, report });
    }
    let reports: Vec<_> = pairs.iter().map(|p| p.report).collect();
    let batch = BatchReport {
        count: pairs.len(),
        mean: MetricReport::mean(&reports),
        pairs,
    };
    write_json(&batch, json)?;
    Ok(())
}

fn eval(fused: Option<PathBuf>, vis: Option<PathBuf>, ir: Option<PathBuf>, dir: Option<PathBuf>, json: &Path) -> CliResult {
    if let Some(root) = dir {
        return eval_dir(&root, json);
    }
    let (Some(f), Some(v), Some(i)) = (fused, vis, ir) else {
        return Err(Failure::Usage("eval needs --fused, --vis and --ir, or --dir".into()));
    };
    let report = evaluate_pair(&load_png(&f)?, &load_png(&v)?, &load_png(&i)?)?;
    write_json(&report, json)?;
    Ok(())
}

fn describe_cmd(config: Option<PathBuf>, ckpt: Option<PathBuf>) -> CliResult {
    let summary = match (config, ckpt) {
        (Some(path), _) => {
            let value = read_json(&path)?;
            let parse_err = |e: serde_json::Error| dreamif_core::Error::Format(format!("{}: {e}", path.display()));
            // A training config carries its model under "model"; anything else is a bare model config.
            let cfg: ModelConfig = if value.get("total_steps").is_some() {
                serde_json::from_value::<TrainConfig>(value).map_err(parse_err)?.model
            } else {
                serde_json::from_value(value).map_err(parse_err)?
            };
            describe(&cfg)?
        }
        (None, Some(path)) => checkpoint::load(&path)?.summary(),
        (None, None) => return Err(Failure::Usage("describe needs --config or --checkpoint".into())),
    };
    println!("{}", serde_json::to_string_pretty(&summary).map_err(dreamif_core::Error::from)?);
    Ok(())
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Synth { n, size, seed, out } => synth(n, size, seed, &out),
        Command::Degrade {
            input,
            kind,
            sigma,
            lam,
            eps,
            seed,
            out,
        } => {
            let mut spec = DegradationSpec::new(kind, seed);
            spec.sigma = sigma.unwrap_or(spec.sigma);
            spec.lam = lam.unwrap_or(spec.lam);
            spec.eps = eps.unwrap_or(spec.eps);
            degrade(&input, spec, &out)
        }
        Command::Train { config, data, out } => train(&config, data, out),
        Command::Fuse {
            checkpoint,
            vis,
            ir,
            out,
            rd_dir,
        } => fuse(&checkpoint, &vis, &ir, &out, rd_dir.as_deref()),
        Command::Eval {
            fused,
            vis,
            ir,
            dir,
            json,
        } => eval(fused, vis, ir, dir, &json),
        Command::Rdmaps { checkpoint, vis, ir, out } => {
            write_rd_maps(&run_model(&checkpoint, &vis, &ir)?, &out)?;
            Ok(())
        }
        Command::Describe { config, checkpoint } => describe_cmd(config, checkpoint),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("dreamif: {}", one_line(text.lines().next().unwrap_or("usage error").trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("dreamif: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Op(e)) => {
            eprintln!("dreamif: {}", one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
