use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mbsync::ablation::run_ablation;
use mbsync::config::RunConfig;
use mbsync::io::{
    evaluate_documents, load_ground_truth, load_result, load_scans, manifest_path, read_json, save_bundle,
    save_result, write_atomic, write_json, GroundTruthDoc, ResultDoc, GROUND_TRUTH,
};
use mbsync::{generate_scene, run_pipeline};


const RESULT_FILE: &str = "result.json";
const METRICS_FILE: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "mbsync", version, about = "Multi-scan multi-body synchronization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (scans, manifest and ground truth).
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Run the pipeline on a scan set and write `result.json`.
    Sync {
        /// Scan directory or manifest file.
        scans: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a result against ground truth and write `metrics.json`.
    Eval {
        /// Result file, or a directory holding `result.json`.
        result: PathBuf,
        /// Ground-truth document, or the scan directory / manifest naming one.
        truth: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare S,W / S,NW / NS / UNZ over seeded scenes with a corrupted pair.
    Ablate {
        /// Number of seeds (overrides the configuration).
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Refinement iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Part-count threshold.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fixed number of parts instead of the spectral estimate.
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    no_sync: bool,
    #[arg(long)]
    unweighted: bool,
    #[arg(long)]
    unnormalized_z: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.scene.seed = s;
        }
        let p = &mut cfg.pipeline;
        if let Some(i) = self.iters {
            p.iterations = i;
        }
        if let Some(a) = self.alpha {
            p.alpha = a;
        }
        if self.parts.is_some() {
            p.parts = self.parts;
        }
        p.ablation.no_sync |= self.no_sync;
        p.ablation.unweighted |= self.unweighted;
        p.ablation.unnormalized_z |= self.unnormalized_z;
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numerical failures anywhere in the chain, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e
        .chain()
        .filter_map(|c| c.downcast_ref::<mbsync::Error>())
        .any(mbsync::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = common.run_config()?;
            let bundle = generate_scene(&cfg.scene)?;
            let dir = common.out_dir()?;
            save_bundle(dir, &bundle)?;
            println!(
                "wrote {} scans of {} points ({} parts) to {}",
                bundle.scans.num_scans(),
                bundle.scans.num_points(),
                bundle.num_parts(),
                dir.display()
            );
        }
        Command::Sync { scans, common } => {
            let cfg = common.run_config()?;
            let set = load_scans(&scans)?;
            let result = run_pipeline(&set, &cfg.pipeline)?;
            let doc = ResultDoc::new(&result, None);
            let path = common.out_dir()?.join(RESULT_FILE);
            save_result(&doc, &path)?;
            println!(
                "{} iterations, {} parts{}; wrote {}",
                doc.iterations.len(),
                doc.num_parts,
                if doc.empty_parts { " (some empty)" } else { "" },
                path.display()
            );
        }
        Command::Eval { result, truth, common } => {
            let result_path = if result.is_dir() { result.join(RESULT_FILE) } else { result };
            let doc = load_result(&result_path)?;
            let gt = load_truth(&truth)?;
            let report = evaluate_documents(&doc, &gt)?;
            let path = common.out_dir()?.join(METRICS_FILE);
            write_json(&path, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { trials, common } => {
            let mut cfg = common.run_config()?;
            if let Some(t) = trials {
                cfg.ablation.trials = t;
            }
            let report = run_ablation(&cfg.scene, &cfg.pipeline, &cfg.ablation)?;
            let dir = common.out_dir()?;
            write_json(&dir.join("ablation.json"), &report)?;
            let table = report.table();
            write_atomic(&dir.join("ablation.txt"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

/// A ground-truth JSON file, or a scan set whose manifest names one.
fn load_truth(path: &Path) -> Result<GroundTruthDoc> {
    let is_manifest = path.is_dir() || path.file_name().is_some_and(|n| n == mbsync::io::MANIFEST);
    if !is_manifest {
        return Ok(read_json(path)?);
    }
    match load_ground_truth(path)? {
        Some(gt) => Ok(gt),
        None => bail!(
            "{} names no ground truth (expected a {GROUND_TRUTH} entry)",
            manifest_path(path).display()
        ),
    }
}
