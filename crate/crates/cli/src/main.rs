use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparsenet_core::harness::presets::{self, ContinualArm};
use sparsenet_core::harness::record::recorded_config;
use sparsenet_core::harness::{
    emit_plotdata, figures_from_events, grid, read_events, run, sweep, DataCache, Event, Experiment,
    ExperimentConfig, GridSpec, Outcome, RunRecord,
};
use sparsenet_core::{Error, Result};

mod fetch;

#[derive(Parser, Debug)]
#[command(name = "sparsenet", version, about = "Sparse, pruned and dendritic network experiments")]
struct Cli {
    /// Experiment JSON, or a run log whose config should be replayed.
    #[arg(long, global = true, value_name = "FILE.json")]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (default runs/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Whole datasets and long schedules instead of desk-scale presets.
    #[arg(long, global = true)]
    full: bool,
    /// Dataset cache root.
    #[arg(long, global = true, env = "SPARSENET_DATA", default_value = "data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dataset management.
    Data {
        #[command(subcommand)]
        action: DataCommand,
    },
    /// Train one network and report its test accuracy.
    Train {
        /// Synthetic data instead of MNIST.
        #[arg(long)]
        toy: bool,
    },
    /// Iterative magnitude pruning with a random-pruning control.
    Imp,
    /// Pruning followed by test accuracy under pixel noise.
    NoiseEval,
    /// Sequential training on a task stream.
    Continual {
        /// mlp, adn-1hot, adn-zeros or adn-avg.
        #[arg(long, default_value = "adn-1hot")]
        arm: String,
        /// pmnist or split-cifar100.
        #[arg(long, default_value = "pmnist")]
        stream: String,
    },
    /// Hyperparameter grid search.
    Grid {
        /// base, sparse or adn.
        #[arg(long, default_value = "base")]
        preset: String,
        /// Grid points evaluated in parallel (default 1; results do not depend on it).
        #[arg(long)]
        workers: Option<usize>,
        /// Keep finished points from an existing log in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Gnuplot-ready series from one or more run logs.
    Plotdata {
        /// Run logs (run.jsonl) to read.
        #[arg(long = "run", required = true, num_args = 1.., value_name = "FILE")]
        runs: Vec<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Download or import a dataset and verify it.
    Fetch {
        /// mnist, cifar10 or cifar100.
        #[arg(long)]
        dataset: String,
        /// Cache root (default: --data-dir).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Local directory of raw or .gz files, or a .tar.gz archive.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Override the download URL; may be repeated.
        #[arg(long)]
        mirror: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_data() {
                3
            } else {
                1
            })
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let kind = match &cli.command {
        Command::Data { action: DataCommand::Fetch { dataset, dir, from, mirror } } => {
            let ds = fetch::Dataset::parse(dataset)?;
            let root = dir.as_deref().unwrap_or(&cli.data_dir);
            let mirrors = if mirror.is_empty() { fetch::default_mirrors(ds) } else { mirror.clone() };
            let manifest = fetch::fetch(root, ds, from.as_deref(), &mirrors)?;
            println!("{} ready; checksums in {}", ds.name(), manifest.display());
            return Ok(());
        }
        Command::Plotdata { runs } => return plotdata(cli, runs),
        Command::Train { toy } => Kind::Train(*toy),
        Command::Imp => Kind::Imp,
        Command::NoiseEval => Kind::Noise,
        Command::Continual { arm, stream } => Kind::Continual(ContinualArm::parse(arm)?, stream.clone()),
        Command::Grid { preset, .. } => Kind::Grid(preset.clone()),
    };
    let mut exp = load_experiment(cli, &kind)?;
    if let Some(seed) = cli.seed {
        exp = exp.with_seeds(&[seed]);
    }
    let (resume, workers) = match &cli.command {
        Command::Grid { resume, workers, .. } => (*resume, *workers),
        _ => (false, None),
    };
    if let (Some(w), ExperimentConfig::Grid(g)) = (workers, &mut exp.experiment) {
        g.workers = w;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
    fs::create_dir_all(&out)?;
    let log = out.join("run.jsonl");
    let mut record = if resume {
        RunRecord::resume(&log, exp.to_value(), &exp.seeds)?
    } else {
        exp.record(Some(&log))?
    };
    let cache = DataCache::new(&cli.data_dir);
    let outcome = run(&exp, &cache, &mut record)?;
    write_artifacts(&out, &exp, &outcome)?;
    let events = record.finish()?;
    if let Some(Event::End { artifact_hash, wall_clock_s }) = events.last() {
        println!("log {} ({:.1}s, artifact {artifact_hash})", log.display(), wall_clock_s);
    }
    Ok(())
}

enum Kind {
    Train(bool),
    Imp,
    Noise,
    Continual(ContinualArm, String),
    Grid(String),
}

impl Kind {
    fn name(&self) -> &'static str {
        match self {
            Kind::Train(_) => "train",
            Kind::Imp => "imp",
            Kind::Noise => "noise-eval",
            Kind::Continual(..) => "continual",
            Kind::Grid(_) => "grid",
        }
    }

    fn preset(&self, full: bool) -> Result<Experiment> {
        Ok(match self {
            Kind::Train(true) => presets::train_toy(),
            Kind::Train(false) => presets::train_mnist(full),
            Kind::Imp => presets::lth(full),
            Kind::Noise => presets::noise(full),
            Kind::Continual(arm, stream) => match stream.as_str() {
                "pmnist" => presets::continual_pmnist(*arm, full),
                "split-cifar100" => presets::continual_split_cifar(*arm, full),
                other => return Err(Error::config(format!("unknown stream {other:?} (pmnist, split-cifar100)"))),
            },
            Kind::Grid(preset) => match preset.as_str() {
                "base" => presets::grid(false, false, full),
                "sparse" => presets::grid(true, false, full),
                "adn" => presets::grid(true, true, full),
                other => return Err(Error::config(format!("unknown grid preset {other:?} (base, sparse, adn)"))),
            },
        })
    }

    fn accepts(&self, config: &ExperimentConfig) -> bool {
        match (self, config) {
            (Kind::Train(_), ExperimentConfig::Train(_)) => true,
            (Kind::Imp, ExperimentConfig::Imp(_)) => true,
            (Kind::Noise, ExperimentConfig::Imp(i)) => i.noise.is_some(),
            (Kind::Continual(..), ExperimentConfig::Continual(_)) => true,
            (Kind::Grid(_), ExperimentConfig::Grid(_)) => true,
            _ => false,
        }
    }
}

/// `--config` may name an experiment JSON or a `.jsonl` run log.
fn load_experiment(cli: &Cli, kind: &Kind) -> Result<Experiment> {
    let Some(path) = &cli.config else { return kind.preset(cli.full) };
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let exp = if path.extension().is_some_and(|e| e == "jsonl") {
        let (config, _) = recorded_config(&read_events(path)?).map_err(|e| Error::config(e.to_string()))?;
        serde_json::from_value(config).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
    } else {
        Experiment::from_json(&text)?
    };
    if !kind.accepts(&exp.experiment) {
        return Err(Error::config(format!("{} does not describe a {} experiment", path.display(), kind.name())));
    }
    Ok(exp)
}

fn write_artifacts(out: &Path, exp: &Experiment, outcome: &Outcome) -> Result<()> {
    match outcome {
        Outcome::Train(runs) => {
            for (seed, o) in runs {
                match o.test_accuracy() {
                    Some(acc) => println!("seed {seed}: test accuracy {acc:.2}% (epoch {})", o.selected_epoch + 1),
                    None => println!("seed {seed}: no test set"),
                }
            }
        }
        Outcome::Imp(seeds) => {
            let mut csv = String::from("seed,arm,round,density,test_accuracy\n");
            let mut noise = Vec::new();
            for s in seeds {
                for arm in &s.arms {
                    let dir = out.join("masks").join(&arm.arm).join(format!("seed{}", s.seed));
                    fs::create_dir_all(&dir)?;
                    for r in &arm.rounds {
                        let stem = dir.join(format!("round{:03}", r.round));
                        r.mask.write_binary(BufWriter::new(fs::File::create(stem.with_extension("spmk"))?))?;
                        fs::write(stem.with_extension("json"), serde_json::to_string(&r.mask.to_json())?)?;
                        csv.push_str(&format!("{},{},{},{},{}\n", s.seed, arm.arm, r.round, r.density, r.best_test_accuracy));
                    }
                    if let Some(last) = arm.rounds.last() {
                        println!(
                            "seed {} {}: {} rounds, final density {:.4}, accuracy {:.2}%",
                            s.seed,
                            arm.arm,
                            arm.rounds.len(),
                            last.density,
                            last.best_test_accuracy
                        );
                    }
                }
                noise.extend(s.noise.iter().cloned());
            }
            fs::write(out.join("imp.csv"), csv)?;
            if !noise.is_empty() {
                fs::write(out.join("noise.csv"), sweep::to_csv(&noise))?;
                println!("noise curves in {}", out.join("noise.csv").display());
            }
        }
        Outcome::Continual(runs) => {
            let mut csv = String::from("seed,task,latest,average\n");
            for (seed, results) in runs {
                for r in results {
                    csv.push_str(&format!("{seed},{},{},{}\n", r.task, r.latest, r.average));
                }
                if let Some(last) = results.last() {
                    println!("seed {seed}: average accuracy over {} tasks {:.2}%", last.task + 1, last.average);
                }
            }
            fs::write(out.join("continual.csv"), csv)?;
        }
        Outcome::Grid(g) => {
            fs::write(out.join("grid.csv"), grid::to_csv(&g.rows))?;
            let mut report = String::new();
            if let ExperimentConfig::Grid(cfg) = &exp.experiment {
                report.push_str(&grid::multiplier_report(&GridSpec::base_cnn(), &GridSpec::sparse(), exp.seeds.len().max(1), 12.0));
                report.push('\n');
                report.push_str(&format!("this grid: {} points\n", cfg.grid.size()));
            }
            report.push_str(&format!("resumed {} points\n", g.resumed));
            for r in g.quarantined() {
                report.push_str(&format!("quarantined point {}: {}\n", r.index, r.error.as_deref().unwrap_or("")));
            }
            match g.best_row() {
                Some(b) => report.push_str(&format!("best point {} score {:.3}: {:?}\n", b.index, b.score.unwrap_or(f64::NAN), b.point)),
                None => report.push_str("no point produced a score\n"),
            }
            fs::write(out.join("report.txt"), &report)?;
            print!("{report}");
        }
    }
    Ok(())
}

fn plotdata(cli: &Cli, runs: &[PathBuf]) -> Result<()> {
    let mut events = Vec::new();
    for path in runs {
        events.extend(read_events(path)?);
    }
    let figures = figures_from_events(&events);
    if figures.is_empty() {
        return Err(Error::data("the run logs hold no rounds, noise levels or tasks to plot"));
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join("plotdata"));
    for path in emit_plotdata(&out, &figures)? {
        println!("{}", path.display());
    }
    Ok(())
}
