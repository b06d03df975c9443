//! `qnnbench`: train, evaluate, streamline, simulate and sweep quantized
//! MLPs.
//!
//! Exit codes: 0 success, 2 usage or argument error, 3 I/O or parse error,
//! 4 training divergence, 5 equivalence failure, 6 partial sweep.

mod fetch;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use qnn_core::datasets::{data_root, sha256_hex, DatasetHandle, DatasetKind, Split};
use qnn_core::hwsim::{
    parse_presets, BoardBudget, FoldingConfig, LogicCostModel, NetworkDims, ResourceReport, CSV_HEADER,
};
use qnn_core::model::{build_mlp, save_model, CLASSES, INPUT_FEATURES};
use qnn_core::streamline::{load_any, streamline_any, verify_equivalence, AnyModel, IntegerNetwork};
use qnn_core::sweep::{run_sweep, SweepOptions, SweepPlan};
use qnn_core::trainer::{evaluate, Checkpoint, TrainConfig, TrainOptions, Trainer};
use qnn_core::Error;

#[derive(Parser)]
#[command(name = "qnnbench", version, about = "Quantized MLP benchmark: train, streamline, simulate, sweep")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Dataset root (default: $QNN_DATA_DIR, then ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// mnist, fashion-mnist or synthetic.
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    /// Use only the first N training samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_limit: Option<usize>,
}

/// `PExSIMD`, e.g. `16x16`.
fn parse_folding(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.trim().split_once('x').ok_or(format!("folding `{s}` is not PExSIMD"))?;
    let pe = a.parse().map_err(|_| format!("bad pe in `{s}`"))?;
    let simd = b.parse().map_err(|_| format!("bad simd in `{s}`"))?;
    Ok((pe, simd))
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
        abits: u8,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
        wbits: u8,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        /// Hidden layer widths.
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep one checkpoint per epoch.
        #[arg(long)]
        keep_checkpoints: bool,
        /// Stop after this many epochs, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Report the test error of a float or integer model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Compile a trained model to integer-only inference.
    Streamline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Check equivalence on the first N test images.
        #[arg(long)]
        verify: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Estimate throughput and resources of a folded accelerator.
    Simulate {
        /// Float or integer model; without it the MLP topology is used.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8), required_unless_present = "model")]
        abits: Option<u8>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8), required_unless_present = "model")]
        wbits: Option<u8>,
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        #[arg(long)]
        pe: usize,
        #[arg(long)]
        simd: usize,
        #[arg(long, default_value_t = qnn_core::hwsim::DEFAULT_CLOCK_MHZ)]
        clock_mhz: f64,
        #[arg(long, default_value_t = 1.0)]
        efficiency: f64,
        #[arg(long, default_value = "pynq-z1")]
        board: String,
        /// Board presets file (TOML tables).
        #[arg(long)]
        boards: Option<PathBuf>,
        /// Logic cost constants (TOML).
        #[arg(long)]
        cost_model: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the CSV header and row here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train, streamline and simulate a grid of configurations.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8), value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
        abits: Vec<u8>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8), value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
        wbits: Vec<u8>,
        /// PExSIMD pairs.
        #[arg(long, value_parser = parse_folding, value_delimiter = ',', default_value = "2x2,2x8,2x16,8x2,8x8,8x16,16x2,16x8,16x16")]
        folding: Vec<(usize, usize)>,
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        /// Stop every run after this many epochs (rerun to resume).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Download or copy a dataset and verify its checksums.
    FetchData {
        #[arg(long, default_value = "mnist")]
        dataset: DatasetKind,
        /// Base URL or local directory holding the IDX files (raw or .gz).
        #[arg(long)]
        source: Option<String>,
        /// Checksum manifest (`<sha256>  <file>` lines) for datasets without a built-in one.
        #[arg(long)]
        checksums: Option<PathBuf>,
    },
}

/// Failure with its exit code.
enum Failure {
    Core(Error),
    Usage(String),
    Verify(String),
    Partial(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Verify(_) => 5,
            Failure::Partial(_) => 6,
            Failure::Core(e) => match e {
                Error::Argument(_) | Error::Shape(_) | Error::Compile(_) | Error::DegenerateChannel { .. } => 2,
                Error::Diverged { .. } | Error::NonFinite(_) => 4,
                _ => 3,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) | Failure::Verify(m) | Failure::Partial(m) => m.clone(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let g = cli.global;
    match cli.command {
        Command::Train {
            data,
            abits,
            wbits,
            epochs,
            hidden,
            out,
            resume,
            keep_checkpoints,
            stop_after,
        } => cmd_train(&g, &data, abits, wbits, epochs, &hidden, &out, resume.as_deref(), keep_checkpoints, stop_after),
        Command::Eval { model, data } => cmd_eval(&g, &model, &data),
        Command::Streamline {
            model,
            out,
            verify,
            data,
        } => cmd_streamline(&g, &model, &out, verify, &data),
        Command::Simulate {
            model,
            abits,
            wbits,
            hidden,
            pe,
            simd,
            clock_mhz,
            efficiency,
            board,
            boards,
            cost_model,
            out,
            csv,
        } => {
            let dims = match (&model, abits, wbits) {
                (Some(path), _, _) => {
                    let inet = match load_any(path)? {
                        AnyModel::Integer(i) => i,
                        float => streamline_any(&float)?,
                    };
                    NetworkDims::from_integer(&inet)
                }
                (None, Some(a), Some(w)) => NetworkDims::mlp(INPUT_FEATURES, &hidden, CLASSES, a, w)?,
                _ => return Err(Failure::Usage("give --model or both --abits and --wbits".into())),
            };
            let budget = match boards {
                Some(p) => parse_presets(&fs::read_to_string(p)?)?
                    .into_iter()
                    .find(|b| b.name == board)
                    .ok_or_else(|| Failure::Usage(format!("board `{board}` not in presets file")))?,
                None => BoardBudget::preset(&board).map_err(|_| Failure::Usage(format!("unknown board `{board}`")))?,
            };
            let cost = match cost_model {
                Some(p) => LogicCostModel::load(p)?,
                None => LogicCostModel::default(),
            };
            let folding = FoldingConfig::uniform(&dims, pe, simd)?
                .with_clock(clock_mhz)
                .with_efficiency(efficiency);
            let report = qnn_core::hwsim::simulate_dims(&dims, &folding, &budget, &cost)?;
            emit_report(&g, &report, out.as_deref(), csv.as_deref())
        }
        Command::Sweep {
            data,
            out,
            epochs,
            abits,
            wbits,
            folding,
            hidden,
            stop_after,
        } => {
            let handle = load_data(&g, &data)?;
            let plan = SweepPlan {
                configs: abits.iter().flat_map(|&a| wbits.iter().map(move |&w| (a, w))).collect(),
                foldings: folding,
                hidden,
                epochs,
                seed: g.seed,
                train_limit: data.limit,
                out_dir: out.clone(),
            };
            let opts = SweepOptions {
                parallel: g.parallel,
                stop_after,
                ..SweepOptions::default()
            };
            let outcome = run_sweep(&plan, &handle, &opts)?;
            let failed = outcome.failures();
            if g.json {
                println!(
                    "{}",
                    json!({
                        "out": out,
                        "runs": outcome.manifest.rows.len(),
                        "failed": failed,
                        "status": outcome.manifest.rows.iter().map(|r| json!({"name": r.name, "status": r.status})).collect::<Vec<_>>(),
                    })
                );
            } else {
                for r in &outcome.manifest.rows {
                    println!("{:6} {}", r.name, r.status);
                }
                println!("results in {}", out.display());
            }
            if failed > 0 {
                return Err(Failure::Partial(format!("{failed} of {} runs did not finish", outcome.manifest.rows.len())));
            }
            Ok(())
        }
        Command::FetchData {
            dataset,
            source,
            checksums,
        } => {
            let root = data_root(g.data_dir.as_deref());
            let manifest = match checksums {
                Some(p) => Some(fs::read_to_string(p)?),
                None => dataset.checksums().map(str::to_string),
            };
            let dir = fetch::fetch(dataset, source.as_deref(), &root, manifest.as_deref())?;
            println!("{} ready in {}", dataset, dir.display());
            Ok(())
        }
    }
}

fn load_data(g: &Global, args: &DataArgs) -> Result<DatasetHandle, Failure> {
    let root = data_root(g.data_dir.as_deref());
    let mut handle = DatasetHandle::load(args.dataset, &root)?;
    if let Some(n) = args.test_limit {
        handle = handle.limit_test(n);
    }
    Ok(handle)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    g: &Global,
    data: &DataArgs,
    abits: u8,
    wbits: u8,
    epochs: usize,
    hidden: &[usize],
    out: &Path,
    resume: Option<&Path>,
    keep_checkpoints: bool,
    stop_after: Option<usize>,
) -> CmdResult {
    if epochs == 0 {
        return Err(Failure::Usage("--epochs must be at least 1".into()));
    }
    let mut handle = load_data(g, data)?;
    if let Some(n) = data.limit {
        handle = handle.limit_train(n);
    }
    let cfg = TrainConfig::for_epochs(epochs, g.seed);
    let trainer = Trainer::new(
        cfg,
        &handle,
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            keep_all_checkpoints: keep_checkpoints,
            stop_after,
        },
    )?;
    let (net, log) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if (ckpt.net.a_bits, ckpt.net.w_bits) != (abits, wbits) {
                return Err(Failure::Usage(format!(
                    "checkpoint holds {}, not A{abits}W{wbits}",
                    ckpt.net.name
                )));
            }
            trainer.resume(ckpt)?
        }
        None => trainer.run(build_mlp(abits, wbits, hidden, g.seed)?)?,
    };
    let model_path = out.join(qnn_core::sweep::MODEL_FILE);
    save_model(&net, &model_path)?;
    let final_error = log.final_test_error();
    if g.json {
        println!(
            "{}",
            json!({
                "model": model_path,
                "epochs": log.records.len(),
                "final_test_error": final_error,
                "best_test_error": log.best_test_error(),
            })
        );
    } else {
        println!(
            "{}: {} epochs, final test error {:.2}%, model {}",
            net.name,
            log.records.len(),
            final_error.unwrap_or(f64::NAN),
            model_path.display()
        );
    }
    Ok(())
}

fn integer_error(inet: &IntegerNetwork, split: &Split) -> Result<f64, Failure> {
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(1000) {
        let (x, y) = split.gather(chunk)?;
        let pred = inet.predict(&x)?;
        wrong += pred.iter().zip(&y).filter(|(p, l)| p != l).count();
    }
    Ok(100.0 * wrong as f64 / split.len() as f64)
}

fn cmd_eval(g: &Global, model: &Path, data: &DataArgs) -> CmdResult {
    let bytes = fs::read(model)?;
    let any = load_any(model)?;
    let handle = load_data(g, data)?;
    let error = match &any {
        AnyModel::Float(net) => evaluate(net, &handle.test)?,
        AnyModel::Integer(inet) => integer_error(inet, &handle.test)?,
    };
    let n_test = handle.test.len();
    if g.json {
        println!(
            "{}",
            json!({"error_percent": error, "n_test": n_test, "model_hash": sha256_hex(&bytes)})
        );
    } else {
        println!("test error: {error:.2}% on {n_test} images");
    }
    Ok(())
}

fn cmd_streamline(g: &Global, model: &Path, out: &Path, verify: Option<usize>, data: &DataArgs) -> CmdResult {
    let any = load_any(model)?;
    let AnyModel::Float(net) = &any else {
        return Err(Failure::Usage(format!("{} is already an integer network", model.display())));
    };
    let inet = streamline_any(&any)?;
    inet.save(out)?;
    info!("wrote {} ({} saturated thresholds)", out.display(), inet.saturations.len());
    let Some(n) = verify else {
        if g.json {
            println!("{}", json!({"out": out, "saturated": inet.saturations.len()}));
        } else {
            println!("wrote {}", out.display());
        }
        return Ok(());
    };
    let handle = load_data(g, data)?;
    let test = handle.test.truncated(n);
    let codes: Vec<u8> = (0..test.len()).flat_map(|i| test.codes(i).to_vec()).collect();
    let report = verify_equivalence(net, &inet, &codes)?;
    if g.json {
        println!(
            "{}",
            json!({"out": out, "inputs": report.inputs, "mismatching_inputs": report.failing_inputs(), "saturated": inet.saturations.len()})
        );
    } else {
        println!("wrote {}; equivalence: {report}", out.display());
    }
    if !report.is_ok() {
        let path = out.with_extension("mismatches.txt");
        let text: String = report.mismatches.iter().map(|m| format!("{m}\n")).collect();
        fs::write(&path, text)?;
        return Err(Failure::Verify(format!("{report}; details in {}", path.display())));
    }
    Ok(())
}

fn emit_report(g: &Global, report: &ResourceReport, out: Option<&Path>, csv: Option<&Path>) -> CmdResult {
    let row = report.csv_row();
    if let Some(p) = out {
        fs::write(p, report.to_json())?;
    }
    if let Some(p) = csv {
        fs::write(p, format!("{CSV_HEADER}\n{row}\n"))?;
    }
    if g.json {
        println!("{}", report.to_json());
    } else {
        println!("{CSV_HEADER}");
        println!("{row}");
        println!(
            "{}: {:.0} img/s, II {} cycles, {:.2} MB/s in, {} LUT, {} FF, {} BRAM18, {}",
            report.name,
            report.img_per_s,
            report.ii_cycles,
            report.dram_mb_s(),
            report.luts,
            report.ffs,
            report.bram18,
            if report.fits { "fits" } else { "does not fit" }
        );
    }
    Ok(())
}
