use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hklab_core::experiment::{emit_summary, run_experiment, ExperimentConfig, RunSummary, Tag};
use hklab_core::Error;

#[derive(Parser)]
#[command(name = "hklab", version, about = "Heat kernel experiments for random walks on fractal graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`, then `out/<tag>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Ball volumes and the fitted growth exponent.
    Graph(Common),
    /// Build (or load from cache) the kernel and check its basic properties.
    Kernel(Common),
    /// Two-sided heat kernel envelope check.
    Hkp(Common),
    /// Cutoff Sobolev constants.
    Csj(Common),
    /// Nash constant over ball indicators.
    Nash(Common),
    /// Monte Carlo exit probabilities.
    Exit(Common),
    /// Davies energy inequality and off-diagonal bound.
    Davies(Common),
    /// Form identities and Stroock–Varopoulos inequalities.
    Identities(Common),
    /// Merge run summaries into report.json and plot_data.csv.
    Report {
        /// summary.json files or directories holding them.
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Graph(c) => run(Tag::Volume, c),
        Command::Kernel(c) => run(Tag::Kernel, c),
        Command::Hkp(c) => run(Tag::Hkp, c),
        Command::Csj(c) => run(Tag::Csj, c),
        Command::Nash(c) => run(Tag::Nash, c),
        Command::Exit(c) => run(Tag::Exit, c),
        Command::Davies(c) => run(Tag::Davies, c),
        Command::Identities(c) => run(Tag::Identities, c),
        Command::Report { inputs, out } => report(&inputs, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(tag: Tag, args: Common) -> Result<u8, Error> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    let mut config = ExperimentConfig::load(&args.config)?;
    config.tag = tag;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args
        .out
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| Path::new("out").join(tag.as_str()));
    let summary = run_experiment(&config, &out)?;
    for (name, v) in &summary.constants {
        println!("{name} = {v}");
    }
    for note in &summary.notes {
        println!("note: {note}");
    }
    let mut code = 0;
    for (name, ok) in &summary.checks {
        println!("check {name}: {}", if *ok { "pass" } else { "FAIL" });
        if !ok {
            code = 4;
        }
    }
    println!("wrote {}", out.display());
    Ok(code)
}

fn collect_summaries(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Error> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let direct = p.join("summary.json");
            if direct.is_file() {
                files.push(direct);
            }
            let mut subdirs: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.join("summary.json").is_file())
                .collect();
            subdirs.sort();
            files.extend(subdirs.into_iter().map(|q| q.join("summary.json")));
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<u8, Error> {
    let files = collect_summaries(inputs)?;
    let mut summaries = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f)?;
        let s: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", f.display())))?;
        summaries.push(s);
    }
    let (doc, csv) = emit_summary(&summaries)?;
    fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    json.push('\n');
    fs::write(out.join("report.json"), json)?;
    fs::write(out.join("plot_data.csv"), csv)?;
    println!("merged {} summaries into {}", summaries.len(), out.display());
    Ok(0)
}
