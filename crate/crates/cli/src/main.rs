use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use img_core::ablation::{self, Variant};
use img_core::data::{self, Dataset, DatasetSpec};
use img_core::verify::{self, Suite};
use img_core::{Checkpoint, Error, Forward, Mode, RunConfig, Tape, Trainer};

#[derive(Parser)]
#[command(name = "img", version, about = "Motion-aware clip classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip archive from a dataset spec (TOML).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics, checkpoints and the config echo.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from `<out-dir>/last.ckpt`.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Config override, e.g. `--set trainer.epochs=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run built-in numerical checks.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Dump CMEM attention and shift kernels for one clip as CSV.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clip_index: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Train a matrix of model variants and write a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        matrix: Matrix,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Matrix {
    /// CMEM and CLIM on/off.
    Modules,
    /// Shift kernel structures.
    Shifts,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Checks,
    Input(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => Failure::Run(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, data, out_dir, resume, stop_after, overrides } => {
            train(&config, &data, &out_dir, resume, stop_after, &overrides)
        }
        Command::Verify { suite } => run_verify(&suite),
        Command::Inspect { checkpoint, data, clip_index, out_dir } => {
            inspect(&checkpoint, &data, clip_index, &out_dir)
        }
        Command::Ablate { config, data, matrix, out, seeds, overrides } => {
            ablate(&config, &data, matrix, &out, &seeds, &overrides)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(spec_path).map_err(|e| io_err(spec_path, e))?;
    let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", spec_path.display())))?;
    let dataset = data::generate(&spec)?;
    dataset.save(out)?;
    println!("wrote {} clips to {}", dataset.len(), out.display());
    println!("checksum {}", dataset.checksum());
    Ok(())
}

fn train(
    config_path: &Path,
    data_path: &Path,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
    overrides: &[String],
) -> Result<(), Failure> {
    let dataset = Dataset::load(data_path)?;
    let last = out_dir.join("last.ckpt");
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut trainer = if resume {
        Trainer::from_checkpoint(&Checkpoint::load(&last)?)?
    } else {
        let mut config = RunConfig::load(config_path, overrides)?;
        config.dataset = dataset.spec.clone();
        Trainer::new(config)?
    };
    trainer.check_dataset(&dataset)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write(&out_dir.join("config.toml"), trainer.config.echo())?;

    // keep only lines of completed epochs so a resumed stream matches an
    // uninterrupted one
    let mut kept = String::new();
    if resume {
        let old = fs::read_to_string(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
        for line in old.lines() {
            let m: img_core::EpochMetrics =
                serde_json::from_str(line).map_err(|e| Failure::Input(format!("{}: {e}", metrics_path.display())))?;
            if m.epoch < trainer.epoch {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    write(&metrics_path, &kept)?;
    let mut sink = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;

    let until = stop_after.unwrap_or(usize::MAX);
    let result = trainer.fit(&dataset, until, |t, lines, improved| {
        for line in lines {
            let text = line.json_line();
            println!("{text}");
            writeln!(sink, "{text}").map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;
        }
        let ck = t.checkpoint();
        ck.save(&last)?;
        if improved {
            ck.save(out_dir.join("best.ckpt"))?;
        }
        Ok(())
    });
    if let Err(Error::NonFiniteLoss { epoch, batch }) = &result {
        let note = serde_json::json!({ "epoch": epoch, "batch": batch, "seed": trainer.config.seed });
        write(&out_dir.join("failure.json"), note.to_string())?;
    }
    result?;
    Ok(())
}

fn run_verify(suite: &str) -> Result<(), Failure> {
    let suite: Suite = suite.parse()?;
    let results = verify::run_suite(suite)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Failure::Checks);
    }
    Ok(())
}

fn inspect(checkpoint: &Path, data_path: &Path, index: usize, out_dir: &Path) -> Result<(), Failure> {
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let dataset = Dataset::load(data_path)?;
    if index >= dataset.len() {
        return Err(Failure::Input(format!("clip index {index} out of range for {} clips", dataset.len())));
    }
    trainer.check_dataset(&dataset)?;
    let tape = Tape::new();
    let ctx = Forward::new(&tape, &trainer.store, Mode::Eval, 0).with_capture();
    let scores = trainer.network.forward(&ctx, tape.constant(dataset.batch(&[index])?), 0.0)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let probes: Vec<_> = ctx.take_probes().into_iter().filter(|(name, _)| name == "attention").collect();
    let cmem_blocks: Vec<usize> =
        trainer.network.blocks.iter().enumerate().filter(|(_, b)| b.cmem.is_some()).map(|(i, _)| i).collect();
    let mut csv = String::from("block,t,mean");
    let channels = probes.first().map_or(0, |(_, a)| a.shape()[2]);
    for c in 0..channels {
        csv.push_str(&format!(",c{c}"));
    }
    csv.push('\n');
    for (block, (_, att)) in cmem_blocks.iter().zip(&probes) {
        let [_, t, c, _, _] = att.dims5()?;
        for ti in 0..t {
            let row = &att.data()[ti * c..(ti + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            csv.push_str(&format!("{block},{ti},{mean}"));
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
    }
    write(&out_dir.join("attention.csv"), csv)?;

    let mut csv = String::from("block,slice,out_channel,in_channel,k_prev,k_cur,k_next\n");
    for (b, block) in trainer.network.blocks.iter().enumerate() {
        let Some(clim) = &block.clim else { continue };
        for (s, shift) in clim.shifts.iter().enumerate() {
            let k = trainer.store.value(shift.weight);
            let data = k.data();
            if k.rank() == 2 {
                for (c, tap) in data.chunks(3).enumerate() {
                    csv.push_str(&format!("{b},{},{c},{c},{},{},{}\n", s + 1, tap[0], tap[1], tap[2]));
                }
            } else {
                let ci = k.shape()[1];
                for (i, tap) in data.chunks(3).enumerate() {
                    csv.push_str(&format!("{b},{},{},{},{},{},{}\n", s + 1, i / ci, i % ci, tap[0], tap[1], tap[2]));
                }
            }
        }
    }
    write(&out_dir.join("shifts.csv"), csv)?;
    let label = dataset.labels[index];
    let scores = scores.value();
    println!("clip {index}: label {label}, scores {:?}", scores.data());
    println!("wrote {} and {}", out_dir.join("attention.csv").display(), out_dir.join("shifts.csv").display());
    Ok(())
}

fn ablate(
    config_path: &Path,
    data_path: &Path,
    matrix: Matrix,
    out: &Path,
    seeds: &[u64],
    overrides: &[String],
) -> Result<(), Failure> {
    let dataset = Dataset::load(data_path)?;
    let mut config = RunConfig::load(config_path, overrides)?;
    config.dataset = dataset.spec.clone();
    Trainer::new(config.clone())?.check_dataset(&dataset)?;
    let variants: Vec<Variant> = match matrix {
        Matrix::Modules => ablation::module_matrix(&config.model),
        Matrix::Shifts => ablation::shift_matrix(&config.model),
    };
    let rows = ablation::run_ablation(&config, &variants, seeds, &dataset)?;
    let csv = ablation::to_csv(&rows);
    print!("{csv}");
    write(out, csv)?;
    write(&out.with_extension("config.toml"), config.echo())?;
    Ok(())
}
