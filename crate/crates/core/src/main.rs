use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bofa::harness::checkpoint;
use bofa::harness::format::{self, BofaFile};
use bofa::harness::{run_from, synth_stream, Pipeline, RunConfig, SynthConfig, TaskStream};
use bofa::inference;
use bofa::{Error, Result};

#[derive(Parser)]
#[command(name = "bofa", version, about = "Exemplar-free class-incremental bridge adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream into a directory
    Synth(SynthArgs),
    /// Run the incremental protocol over a stream directory
    Run(RunArgs),
    /// Evaluate a checkpoint on a feature file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Print stage metrics and memory accounting of a checkpoint
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Check that files parse under the binary formats
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1993)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, default_value_t = 10)]
    classes_per_task: usize,
    #[arg(long, default_value_t = 100)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 64)]
    d_o: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long)]
    text_noise: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    shared: Option<f64>,
    #[arg(long)]
    w0_noise: Option<f64>,
    #[arg(long)]
    task_dim: Option<usize>,
    #[arg(long)]
    task_shift: Option<f64>,
    #[arg(long)]
    noise_floor: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Directory holding train.bofa, test.bofa, text.bofa and w0.bofa
    #[arg(long)]
    data: PathBuf,
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable: --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Save a checkpoint here after every task
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many tasks in total
    #[arg(long)]
    stop_after: Option<usize>,
    /// Write canonical metrics here
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn synth(a: SynthArgs) -> Result<()> {
    let base = SynthConfig::default();
    let cfg = SynthConfig {
        seed: a.seed,
        tasks: a.tasks,
        classes_per_task: a.classes_per_task,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        d_o: a.d_o,
        d: a.d,
        text_noise: a.text_noise.unwrap_or(base.text_noise),
        spread: a.spread.unwrap_or(base.spread),
        shared: a.shared.unwrap_or(base.shared),
        w0_noise: a.w0_noise.unwrap_or(base.w0_noise),
        task_dim: a.task_dim.unwrap_or(base.task_dim),
        task_shift: a.task_shift.unwrap_or(base.task_shift),
        noise_floor: a.noise_floor.unwrap_or(base.noise_floor),
    };
    let bench = synth_stream(&cfg)?;
    let (train, test) = bench.stream.pools()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    format::write_features(a.out.join("train.bofa"), &train)?;
    format::write_features(a.out.join("test.bofa"), &test)?;
    format::write_text_protos(a.out.join("text.bofa"), &bench.stream.text)?;
    format::write_bridge_w0(a.out.join("w0.bofa"), &bench.stream.w0)?;
    println!(
        "wrote {} train / {} test rows, {} classes, d_o = {}, d = {} to {}",
        train.len(),
        test.len(),
        bench.stream.text.class_ids.len(),
        cfg.d_o,
        cfg.d,
        a.out.display()
    );
    Ok(())
}

fn load_stream(dir: &Path, cfg: &RunConfig) -> Result<TaskStream> {
    let train = format::read_features(dir.join("train.bofa"))?;
    let test = format::read_features(dir.join("test.bofa"))?;
    let text = format::read_text_protos(dir.join("text.bofa"))?;
    let w0 = format::read_bridge_w0(dir.join("w0.bofa"))?;
    TaskStream::from_pool(&train, &test, text, w0, cfg.base_m, cfg.inc_n, cfg.class_order_seed)
}

fn run(a: RunArgs) -> Result<()> {
    let mut pipeline = match &a.resume {
        Some(dir) => checkpoint::load(dir)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::from_file(p)?,
                None => RunConfig::default(),
            };
            for kv in &a.overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got {kv:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let w0 = format::read_bridge_w0(a.data.join("w0.bofa"))?;
            Pipeline::new(w0, cfg)?
        }
    };
    if a.resume.is_some() && (a.config.is_some() || !a.overrides.is_empty()) {
        return Err(Error::InvalidArgument(
            "a resumed run uses the checkpoint's config; drop --config/--set".into(),
        ));
    }
    let stream = load_stream(&a.data, &pipeline.config)?;
    let ckpt = a.checkpoint.clone();
    let metrics = run_from(&mut pipeline, &stream, a.stop_after, |p, r| {
        let old = r.old_class_accuracy.map_or("-".to_string(), |v| format!("{:.4}", v));
        println!(
            "task {} classes {} accuracy {:.4} old {}",
            r.task + 1,
            r.classes.len(),
            r.accuracy,
            old
        );
        match &ckpt {
            Some(dir) => checkpoint::save(p, dir),
            None => Ok(()),
        }
    })?;
    print!("{}", metrics.report());
    if let Some(path) = &a.metrics {
        fs::write(path, metrics.canonical_text()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn eval(ckpt: &Path, test: &Path) -> Result<()> {
    let p = checkpoint::load(ckpt)?;
    let data = format::read_features(test)?;
    let known = data.filter(|l| p.bank.contains(l));
    let preds = p.predict(&known)?;
    println!("rows = {}", data.len());
    println!("rows_seen_classes = {}", known.len());
    println!("accuracy = {}", inference::accuracy(&known, &preds));
    Ok(())
}

fn report(ckpt: &Path) -> Result<()> {
    let p = checkpoint::load(ckpt)?;
    let m = p.metrics()?;
    let mem = p.memory_report();
    print!("{}", m.report());
    println!("tasks_done = {}", p.tasks_done);
    println!("classes = {}", p.bank.classes().len());
    for (i, a) in m.stage_accuracies.iter().enumerate() {
        println!("stage_accuracy.{} = {}", i + 1, a);
    }
    println!("final_accuracy = {}", m.final_accuracy());
    println!("average_accuracy = {}", m.average_accuracy());
    println!("lambda = {}", m.lambda);
    println!("scatter_bytes = {}", mem.scatter_bytes);
    println!("mean_feat_bytes = {}", mem.mean_feat_bytes);
    println!("aux_bytes = {}", mem.aux_bytes);
    println!("bridge_bytes = {}", mem.bridge_bytes);
    println!("total_bytes = {}", mem.total());
    Ok(())
}

fn validate(files: &[PathBuf]) -> Result<()> {
    for f in files {
        let desc = match format::read_file(f)? {
            BofaFile::Features(x) => format!("visual features n = {} d_o = {}", x.len(), x.width()),
            BofaFile::Text(t) => format!("text prototypes C = {} d = {}", t.class_ids.len(), t.protos.cols()),
            BofaFile::Weights(w) => format!("bridge weights {} x {}", w.rows(), w.cols()),
            BofaFile::State(s) => format!("state matrix {} x {}", s.matrix.rows(), s.matrix.cols()),
        };
        println!("{}: ok, {desc}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Eval { checkpoint, test } => eval(&checkpoint, &test),
        Command::Report { checkpoint } => report(&checkpoint),
        Command::Validate { files } => validate(&files),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
