//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use transfergrid_core::dataset::TaskDataset;
use transfergrid_core::models::ArchKind;
use transfergrid_core::transfer::{pretrain_source, probe_target, TransferMatrix};

use crate::artifacts;
use crate::checkpoint::{self, Provenance};
use crate::dataio;
use crate::error::{Error, Result, EXIT_OK, EXIT_USAGE};
use crate::fsutil::{read_json, write_json};
use crate::pipeline::{self, PipelineConfig, RunManifest, TrainOverrides, DEFAULT_PERMUTATIONS, DEFAULT_THRESHOLD};

#[derive(Debug, Parser)]
#[command(name = "transfergrid", version, about = "Task-transferability benchmark for compact EEG decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort from a cohort spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trials per class and subject.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw a subject-aligned split plan and write `split.json`.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one source model for one fold (a diagonal cell) and checkpoint it.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_parser = parse_arch, default_value = "shallow")]
        arch: ArchKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe a checkpointed representer on another task.
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full transfer grid and write every artifact.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated list; more than one gives one subdirectory each.
        #[arg(long, value_parser = parse_arch, value_delimiter = ',', default_value = "shallow")]
        arch: Vec<ArchKind>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
        permutations: usize,
        /// Rerun exactly what an existing run manifest describes.
        #[arg(long, conflicts_with_all = ["data", "split"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute scores, graph, dendrogram and stats of a finished run.
    Analyze {
        /// Run directory holding matrix.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        permutations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare architectures across run directories on their diagonal cells.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split plan from `split`; drawn from --seed when absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Learning rate override (default: the architecture's).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

fn parse_arch(s: &str) -> std::result::Result<ArchKind, String> {
    ArchKind::parse(s).ok_or_else(|| format!("unknown architecture {s:?} (expected shallow, eegnet or inception)"))
}

impl RunArgs {
    fn data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::Usage("--data is required".into()))
    }

    fn config(&self, archs: Vec<ArchKind>, out: &Path) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            data: self.data()?.to_path_buf(),
            archs,
            folds: self.folds,
            seed: self.seed,
            out: out.to_path_buf(),
            threshold: DEFAULT_THRESHOLD,
            permutations: DEFAULT_PERMUTATIONS,
            jobs: 1,
            split: self.split.clone(),
            overrides: TrainOverrides { learning_rate: self.lr, max_epochs: self.max_epochs, patience: self.patience },
        })
    }
}

fn find_task<'a>(tasks: &'a [TaskDataset], id: &str) -> Result<&'a TaskDataset> {
    tasks.iter().find(|t| t.task_id == id).ok_or_else(|| {
        let known: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
        Error::Usage(format!("unknown task {id:?}; available: {}", known.join(", ")))
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, trials, seed } => {
            let tasks = pipeline::synthesize(&spec, &out, trials, seed)?;
            println!("{}", tasks.join("\n"));
        }
        Command::Split { data, folds, seed, out } => {
            let tasks = dataio::load_datasets(&data)?;
            let plan = pipeline::plan_for(&tasks, folds, seed)?;
            let path = out.join("split.json");
            dataio::write_plan(&plan, &path)?;
            println!("{}", path.display());
        }
        Command::Train { run, task, fold, arch, out } => {
            let cfg = run.config(vec![arch], &out)?;
            cfg.validate()?;
            let tasks = dataio::load_datasets(&cfg.data)?;
            let plan = match &cfg.split {
                Some(p) => dataio::read_plan(p)?,
                None => pipeline::plan_for(&tasks, cfg.folds, cfg.seed)?,
            };
            let src = find_task(&tasks, &task)?;
            let grid = cfg.grid_config(arch);
            let (model, cell) = pretrain_source(src, &plan, &grid, fold)?;
            let provenance = Provenance { source: task.clone(), fold, grid, plan };
            checkpoint::save_model(&model, &provenance, &out.join("checkpoint"))?;
            write_json(&out.join("train.json"), &cell)?;
            println!("{task}\t{fold}\t{:.4}", cell.evaluation.balanced_accuracy);
        }
        Command::Probe { data, checkpoint: ckpt, task, out } => {
            let (model, prov) = checkpoint::load_model(&ckpt)?;
            let tasks = dataio::load_datasets(&data)?;
            let tgt = find_task(&tasks, &task)?;
            let cell = probe_target(&model, &prov.source, tgt, &prov.plan, &prov.grid, prov.fold)?;
            write_json(&out.join("probe.json"), &cell)?;
            println!("{}\t{task}\t{}\t{:.4}", prov.source, prov.fold, cell.evaluation.balanced_accuracy);
        }
        Command::Grid { run, arch, jobs, threshold, permutations, manifest, out } => {
            if let Some(m) = manifest {
                pipeline::rerun(&m, &out, jobs)?;
                println!("{}", out.display());
                return Ok(());
            }
            let mut cfg = run.config(arch, &out)?;
            cfg.jobs = jobs;
            cfg.threshold = threshold;
            cfg.permutations = permutations;
            for dir in pipeline::run_pipeline(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Analyze { out, threshold, permutations, seed } => {
            let m: TransferMatrix = read_json(&out.join(artifacts::MATRIX_JSON))?;
            let recorded: Option<RunManifest> = {
                let p = out.join(pipeline::RUN_MANIFEST);
                if p.is_file() {
                    Some(read_json(&p)?)
                } else {
                    None
                }
            };
            let threshold = threshold.or(recorded.as_ref().map(|r| r.threshold)).unwrap_or(DEFAULT_THRESHOLD);
            let permutations = permutations.or(recorded.as_ref().map(|r| r.permutations)).unwrap_or(DEFAULT_PERMUTATIONS);
            let seed = seed.or(recorded.as_ref().map(|r| r.seed)).unwrap_or(0);
            if !threshold.is_finite() || permutations == 0 {
                return Err(Error::Usage("--threshold must be finite and --permutations at least 1".into()));
            }
            let a = artifacts::analyze(&m, threshold, permutations, seed)?;
            artifacts::write_outputs(&out, &m, &a)?;
            print!("{}", a.scores.to_csv());
        }
        Command::Report { runs, permutations, seed, out } => {
            if permutations == 0 {
                return Err(Error::Usage("--permutations must be at least 1".into()));
            }
            let r = pipeline::build_report(&runs, permutations, seed)?;
            write_json(&out.join(pipeline::REPORT_JSON), &r)?;
            for c in &r.comparisons {
                println!("{}\t{}\tcombined p {:.4}\tadjusted p {:.4}", c.model_a, c.model_b, c.combined_p, c.adjusted_p);
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
