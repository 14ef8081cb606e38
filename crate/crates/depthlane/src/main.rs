use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depthlane::dataset::{self, read_dataset, split_dirs};
use depthlane::pipeline::{self, model_config};
use depthlane::report::Report;
use depthlane::{checkpoint, dump, plot, Error, Result, TrainConfig};
use depthlane_core::objective::TrainingExample;
use depthlane_core::postprocess::extract_lanes;
use depthlane_core::{BevGridSpec, SceneParams};

/// First scene seed of the validation split, offset from the training seed.
const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Parser)]
#[command(
    name = "depthlane",
    version,
    about = "Depth-aware BEV lane detection on synthetic roads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate `OUT/train` and `OUT/val` synthetic splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Render at 1/N of the default 128x256 size.
        #[arg(long, default_value_t = 1)]
        downscale: usize,
    },
    /// Depth pretraining for method1/method2 configs.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train; writes model.ckpt and run.json to the config's out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's validation split, else its training split.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Key-value report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict lanes for one sample and write a lane dump.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the sample's ground truth here.
        #[arg(long)]
        gt_out: Option<PathBuf>,
    },
    /// Train and compare model variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated; see `pipeline::VARIANTS`.
        #[arg(long, value_delimiter = ',', default_value = "no-depth,no-dat,full")]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render predicted and ground-truth lane dumps as an SVG.
    Plot {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the BEV extent from this split instead of the default grid.
        #[arg(long)]
        split: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            train,
            val,
            seed,
            downscale,
        } => {
            if downscale == 0 {
                return Err(Error::Config("downscale must be positive".into()));
            }
            let base = SceneParams::default().downscaled(downscale);
            let (train_dir, val_dir) = split_dirs(&out);
            dataset::write_dataset(&dataset::generate(&base, seed, train)?, &train_dir)?;
            dataset::write_dataset(&dataset::generate(&base, seed + VAL_SEED_OFFSET, val)?, &val_dir)?;
            println!(
                "wrote {train} training and {val} validation samples to {}",
                out.display()
            );
        }
        Command::Pretrain { config } => {
            let cfg = TrainConfig::load(&config)?;
            let (path, record) = pipeline::pretrain_depth(&cfg)?;
            let last = record.steps().last().map_or(f64::NAN, |s| s.total);
            println!(
                "depth loss {last:.4} after {} steps; checkpoint {}",
                record.steps().len(),
                path.display()
            );
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let record = pipeline::train(&cfg)?;
            let last = record.steps().last().map_or(f64::NAN, |s| s.total);
            println!("final loss {last:.4} in {:.1} s", record.wall_clock_secs);
            if let Some(e) = record.evals().last() {
                print!("{}", e.report.table());
            }
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let split = split
                .or_else(|| cfg.val_dataset.clone())
                .unwrap_or_else(|| cfg.dataset.clone());
            let report = Report::from(&pipeline::evaluate_run(&checkpoint, &split, &cfg)?);
            print!("{}", report.table());
            if let Some(out) = out {
                write(&out, &report.to_key_value())?;
            }
        }
        Command::Infer {
            config,
            checkpoint,
            split,
            index,
            out,
            gt_out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let data = read_dataset(&split)?;
            let sample = data
                .samples
                .get(index)
                .ok_or_else(|| Error::Config(format!("sample {index} out of range ({} samples)", data.len())))?;
            let mc = model_config(&cfg, &data)?;
            let model = checkpoint::load(&checkpoint, &mc)?;
            let ex = TrainingExample::new(sample, &mc).map_err(|e| Error::Config(e.to_string()))?;
            let (pred, _) = model.predict(&ex.input)?;
            let lanes = extract_lanes(&pred, &cfg.cluster_params(), &mc.grid);
            write(&out, &dump::write_lanes(&lanes))?;
            if let Some(gt_out) = gt_out {
                write(&gt_out, &dump::write_lanes(&dump::from_polylines(&sample.lanes)))?;
            }
            println!(
                "{} lanes predicted, {} in ground truth",
                lanes.len(),
                sample.lanes.len()
            );
        }
        Command::Ablate { config, variants, out } => {
            let cfg = TrainConfig::load(&config)?;
            let table = pipeline::ablate(&cfg, &variants)?.render();
            print!("{table}");
            if let Some(out) = out {
                write(&out, &table)?;
            }
        }
        Command::Plot { pred, gt, out, split } => {
            let parse = |p: &Path| dump::read_lanes(&read(p)?).map_err(|reason| Error::format(p, reason));
            let pred_lanes = parse(&pred)?;
            let gt_lanes: Vec<_> = parse(&gt)?.into_iter().map(|l| l.points).collect();
            let grid: BevGridSpec = match split {
                Some(dir) => read_dataset(&dir)?.spec.grid,
                None => SceneParams::default().grid,
            };
            let title = pred
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            write(&out, &plot::render(&pred_lanes, &gt_lanes, &grid, &title))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
