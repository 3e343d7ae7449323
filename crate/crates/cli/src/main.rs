use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use qtrack::evaluation::{Annotations, MetricsReport};
use qtrack::gradsuite::run_suite;
use qtrack::io::{
    self, format_log_record, list_sequences, load_checkpoint, mot_to_annotations, read_dataset, read_mot_file,
    read_sequence, save_checkpoint, tracks_to_mot, write_dataset, write_file, write_mot, RunConfig,
    LOG_HEADER,
};
use qtrack::model::Model;
use qtrack::simulator::{simulate_sequence, Clip};
use qtrack::tracker::track_clip;
use qtrack::training::Trainer;

mod report;

#[derive(Parser, Debug)]
#[command(name = "qtrack", version, about = "Query-propagation multiple-object tracking on synthetic video")]
struct Cli {
    /// Print the configuration (defaults, or --config merged over them) as JSON and exit.
    #[arg(long)]
    dump_config: bool,

    /// Configuration file used by --dump-config.
    #[arg(long, requires = "dump_config")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate sequences and write a dataset dump.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train a model; writes checkpoints, the training log and the config used.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides paths.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides paths.data_dir.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Track every sequence of a dataset dump and write MOTChallenge result files.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lifecycle thresholds are read from here.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score results against ground truth. Both paths are files, or a dataset
    /// dump and a directory of per-sequence result files.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        res: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck,
    /// Loss curves, metric bars and a summary table from logs and reports.
    Report {
        #[arg(long)]
        log: Vec<PathBuf>,
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => {
            let mut c = RunConfig::default();
            c.resolve_seeds();
            Ok(c)
        }
    }
}

fn generate(config: Option<&Path>, out: &Path, split: Split) -> Result<()> {
    let cfg = load_config(config)?;
    let (start, n) = match split {
        Split::Train => (0, cfg.data.n_train),
        Split::Val => (cfg.data.n_train, cfg.data.n_val),
    };
    let seqs = (start..start + n)
        .map(|i| simulate_sequence::<f32>(&cfg.world_for(i), cfg.data.seq_len))
        .collect::<Result<Vec<_>, _>>()?;
    write_dataset(out, &seqs, &cfg)?;
    println!("wrote {n} sequences of {} frames to {}", cfg.data.seq_len, out.display());
    Ok(())
}

fn train(config: Option<&Path>, epochs: Option<usize>, out: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = out {
        cfg.paths.out_dir = o;
    }
    if data.is_some() {
        cfg.paths.data_dir = data;
    }
    cfg.validate()?;
    let out = cfg.paths.out_dir.clone();
    let seqs: Vec<Clip<f32>> = match &cfg.paths.data_dir {
        Some(d) => read_dataset(d, cfg.model.image_size).with_context(|| format!("reading {}", d.display()))?,
        None => (0..cfg.data.n_train)
            .map(|i| simulate_sequence(&cfg.world_for(i), cfg.data.seq_len))
            .collect::<Result<_, _>>()?,
    };
    if seqs.is_empty() {
        bail!("no training sequences");
    }
    write_file(&out.join("config.json"), cfg.to_json())?;
    let model = Model::<f32>::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss, cfg.lifecycle.iou_keep)?;
    let log_path = out.join("train_log.csv");
    write_file(&log_path, format!("{LOG_HEADER}\n"))?;
    let mut log = OpenOptions::new().append(true).open(&log_path)?;
    let every = cfg.train.checkpoint_every;
    for epoch in 0..cfg.train.epochs {
        let mut pending = Ok(());
        let records = trainer.train_epoch_with(&seqs, epoch, |model, rec| {
            if every > 0 && rec.iteration % every == 0 && pending.is_ok() {
                pending = save_checkpoint(model, &out.join(format!("checkpoint_{:07}.qtck", rec.iteration)));
            }
        })?;
        pending?;
        for r in &records {
            writeln!(log, "{}", format_log_record(r))?;
        }
        let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
        eprintln!(
            "epoch {epoch:>4}  iter {:>7}  clip {}  loss {mean:.4}",
            trainer.iteration,
            records.first().map_or(0, |r| r.clip_len)
        );
    }
    let path = out.join("model.qtck");
    save_checkpoint(&trainer.model, &path)?;
    println!("wrote {} after {} iterations", path.display(), trainer.iteration);
    Ok(())
}

fn track(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let model: Model<f32> = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut cfg = load_config(config)?;
    cfg.model = model.config.clone();
    cfg.world.image_size = model.config.image_size;
    cfg.world.channels = model.config.channels;
    cfg.lifecycle.validate().map_err(io::IoError::Config)?;
    let dirs = list_sequences(data)?;
    if dirs.is_empty() {
        bail!("{} holds no sequences", data.display());
    }
    for dir in &dirs {
        let clip: Clip<f32> = read_sequence(dir, model.config.image_size)?;
        let tracks = track_clip(&model, &clip, &cfg.lifecycle)?;
        let name = dir.file_name().expect("sequence directory name").to_string_lossy();
        write_file(
            &out.join(format!("{name}.txt")),
            write_mot(&tracks_to_mot(&tracks, model.config.image_size)),
        )?;
    }
    write_file(&out.join("config.json"), cfg.to_json())?;
    println!("tracked {} sequences into {}", dirs.len(), out.display());
    Ok(())
}

/// Ground truth keeps records flagged as considered (confidence > 0); every
/// result record counts. Pixel units are kept since overlap is scale-free.
fn eval_pair(gt: &Path, res: &Path, iou: f64) -> Result<MetricsReport> {
    let g = mot_to_annotations(&read_mot_file(gt)?, 1, 0.0);
    let h = if res.is_file() {
        mot_to_annotations(&read_mot_file(res)?, 1, f64::NEG_INFINITY)
    } else {
        Annotations::new()
    };
    Ok(MetricsReport::evaluate(&g, &h, iou))
}

fn eval(gt: &Path, res: &Path, iou: f64, out: Option<&Path>) -> Result<()> {
    if !(iou > 0.0 && iou <= 1.0) {
        bail!("--iou must lie in (0, 1], got {iou}");
    }
    let report = if gt.is_dir() {
        let dirs = list_sequences(gt)?;
        if dirs.is_empty() {
            bail!("{} holds no sequences", gt.display());
        }
        let mut parts = Vec::new();
        for dir in &dirs {
            let name = dir.file_name().expect("sequence directory name").to_string_lossy().to_string();
            let r = eval_pair(&dir.join("gt").join("gt.txt"), &res.join(format!("{name}.txt")), iou)?;
            println!("{name}: MOTA {:.4} IDF1 {:.4} IDS {}", r.mota, r.idf1, r.ids);
            parts.push(r);
        }
        MetricsReport::combine(&parts)
    } else {
        if !gt.is_file() {
            bail!("ground truth {} does not exist", gt.display());
        }
        if !res.is_file() {
            bail!("results {} do not exist", res.display());
        }
        eval_pair(gt, res, iou)?
    };
    println!("{report}");
    println!("{}", report.to_key_values().trim_end());
    if let Some(o) = out {
        write_file(o, report.to_key_values())?;
    }
    Ok(())
}

fn gradcheck() -> Result<()> {
    let results = run_suite();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!(
            "{} {:<26} max rel err {:.2e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_config {
        print!("{}", load_config(cli.config.as_deref())?.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    match command {
        Command::Generate { config, out, split } => generate(config.as_deref(), &out, split),
        Command::Train {
            config,
            epochs,
            out,
            data,
        } => train(config.as_deref(), epochs, out, data),
        Command::Track {
            checkpoint,
            data,
            out,
            config,
        } => track(&checkpoint, &data, &out, config.as_deref()),
        Command::Eval { gt, res, iou, out } => eval(&gt, &res, iou, out.as_deref()),
        Command::Gradcheck => gradcheck(),
        Command::Report { log, metrics, out } => report::write_report(&log, &metrics, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
