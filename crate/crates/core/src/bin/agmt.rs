use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agmt::config::{threads_from_env, RunConfig};
use agmt::data::{generate_synthetic, write_dataset, SyntheticSpec};
use agmt::error::{Error, Result};
use agmt::grouping::set_softmax_axis_fault;
use agmt::interpret::ExemplarStat;
use agmt::pipeline::{self, load_model, load_split, train_run, write_report, Split, VisualizeOptions};
use agmt::selfcheck::{self, SelfCheckOptions};

#[derive(Parser)]
#[command(name = "agmt", version, about = "Attentive grouping for deep metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic part-structured dataset plus its manifest.
    Generate(GenerateArgs),
    /// Train a model, writing config, log and checkpoints to a run directory.
    Train(TrainArgs),
    /// Embed a split with a trained checkpoint and report retrieval and clustering metrics.
    Eval(EvalArgs),
    /// Export the top attention-map overlays of selected groups.
    Visualize(VisualizeArgs),
    /// Run the numerical self-check suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; the run's configured data source when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated Recall@K cut-offs; the run's eval.k when omitted.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for eval.txt and eval.jsonl; the checkpoint's directory when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Groups to export (comma-separated); all groups when omitted.
    #[arg(long, value_delimiter = ',')]
    group: Vec<usize>,
    #[arg(long, default_value_t = 12)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Exemplar ranking statistic: max or mean attention.
    #[arg(long)]
    stat: Option<String>,
    /// Also export an original/shifted heatmap pair for the top exemplar,
    /// using the cyclic shift DY,DX.
    #[arg(long, value_name = "DY,DX", num_args = 0..=1, default_missing_value = "5,7")]
    shift_demo: Option<String>,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Normalize attention over groups instead of positions, to show which
    /// checks catch the fault.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Visualize(a) => visualize(a),
        Command::Selfcheck(a) => return selfcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn is_non_empty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    Ok(entries.next().is_some())
}

fn generate(a: GenerateArgs) -> Result<()> {
    if is_non_empty_dir(&a.out)? && !a.force {
        return Err(Error::Usage(format!(
            "{} exists and is not empty (use --force to write into it)",
            a.out.display()
        )));
    }
    let synth = generate_synthetic(&SyntheticSpec {
        classes: a.classes,
        per_class: a.per_class,
        image_size: a.size,
        channels: a.channels,
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_dataset(&a.out, &synth)?;
    println!(
        "wrote {} images in {} classes ({}x{}x{}) to {}",
        synth.dataset.len(),
        a.classes,
        a.size,
        a.size,
        a.channels,
        a.out.display()
    );
    Ok(())
}

fn read_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    RunConfig::parse(&text, overrides)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref(), &a.overrides)?;
    let data = load_split(&cfg, None, Split::Train)?;
    let per_epoch = (data.len() / cfg.train.batch_size()).max(1) as u64;
    let quiet = a.quiet;
    let trainer = train_run(&cfg, &data, &a.out, a.resume, |r| {
        if !quiet && (r.step == 1 || r.step % per_epoch == 0) {
            println!("epoch={} {}", r.step.div_ceil(per_epoch), r.log_line());
        }
    })?;
    println!(
        "trained {} steps on {} images; checkpoint in {}",
        trainer.adam.step,
        data.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (mut cfg, model) = load_model(&a.checkpoint)?;
    if !a.k.is_empty() {
        cfg.eval.ks = a.k.clone();
    }
    let data = load_split(&cfg, a.data.as_deref(), Split::parse(&a.split)?)?;
    let report = pipeline::evaluate(&model, &data, &cfg, threads_from_env()?)?;
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_report(&dir, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn parse_shift(s: &str) -> Result<(isize, isize)> {
    let bad = || Error::Usage(format!("--shift-demo expects DY,DX, got {s:?}"));
    let (dy, dx) = s.split_once(',').ok_or_else(bad)?;
    Ok((dy.trim().parse().map_err(|_| bad())?, dx.trim().parse().map_err(|_| bad())?))
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let (cfg, model) = load_model(&a.checkpoint)?;
    let split = Split::parse(&a.split)?;
    let stat = match &a.stat {
        Some(s) => ExemplarStat::parse(s)?,
        None => cfg.eval.exemplar_stat,
    };
    let groups = if a.group.is_empty() {
        (0..model.groups()).collect()
    } else {
        a.group.clone()
    };
    let opts = VisualizeOptions {
        groups,
        top: a.top,
        split: split.name().to_string(),
        shift_demo: a.shift_demo.as_deref().map(parse_shift).transpose()?,
    };
    let data = load_split(&cfg, a.data.as_deref(), split)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let report = pipeline::visualize(&model, &data, &opts, stat, &a.out, threads_from_env()?)?;
    println!("exported {} overlays to {}", report.exported.len(), a.out.display());
    if report.clipped {
        println!("fewer than {} images available; exported all of them", a.top);
    }
    if let Some(d) = report.shift_max_diff {
        println!("shift demo: max deviation from the shifted original heatmap {d:.3e}");
    }
    Ok(())
}

fn selfcheck(a: SelfcheckArgs) -> ExitCode {
    set_softmax_axis_fault(a.inject_fault);
    let opts = SelfCheckOptions {
        seed: a.seed,
        ..SelfCheckOptions::default()
    };
    match selfcheck::run(&opts) {
        Ok(report) => {
            print!("{}", report.to_table());
            match report.first_failure() {
                None => ExitCode::SUCCESS,
                Some(f) => {
                    eprintln!("selfcheck failed: {}/{}", f.suite, f.name);
                    ExitCode::from(1)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
