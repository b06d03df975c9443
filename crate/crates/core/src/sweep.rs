//! Bit-width × folding sweeps with a resumable run manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.csv              one row per (abits, wbits) run
//! accuracy.csv              one row per (abits, wbits, epoch)
//! hardware.csv              one row per (abits, wbits, pe, simd)
//! long.csv                  tidy (name, abits, wbits, pe, simd, epoch, metric, value)
//! runs/AxWy/                model.qnn, model.qnni, checkpoint.qnnc, train_log.csv
//! ```
//!
//! Master CSVs carry no wall-clock columns, so identical plans give
//! byte-identical files whatever the scheduling or interruptions.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::write_atomic;
use crate::datasets::DatasetHandle;
use crate::error::{Error, Result};
use crate::hwsim::{simulate, BoardBudget, FoldingConfig, HardwareRow, LogicCostModel, NetworkDims};
use crate::model::{build_mlp_with, config_name, save_model, MlpShape, DEFAULT_HIDDEN};
use crate::streamline::streamline;
use crate::trainer::{Checkpoint, TrainConfig, TrainOptions, Trainer, CHECKPOINT_FILE, LOG_FILE};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const HARDWARE_FILE: &str = "hardware.csv";
pub const LONG_FILE: &str = "long.csv";
pub const MODEL_FILE: &str = "model.qnn";
pub const INTEGER_FILE: &str = "model.qnni";
const HASH_FILE: &str = "config.hash";

pub const STATUS_DONE: &str = "done";
pub const STATUS_INTERRUPTED: &str = "interrupted";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub configs: Vec<(u8, u8)>,
    pub foldings: Vec<(usize, usize)>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    /// Keep only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub out_dir: PathBuf,
}

impl SweepPlan {
    /// The 7 × 7 bit-width grid with PE/SIMD in {2, 8, 16}².
    pub fn full(out_dir: impl Into<PathBuf>, epochs: usize, seed: u64) -> Self {
        let configs = (2..=8u8).flat_map(|a| (2..=8u8).map(move |w| (a, w))).collect();
        let foldings = [2, 8, 16]
            .iter()
            .flat_map(|&p| [2, 8, 16].iter().map(move |&s| (p, s)))
            .collect();
        Self {
            configs,
            foldings,
            hidden: DEFAULT_HIDDEN.to_vec(),
            epochs,
            seed,
            train_limit: None,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::arg("sweep has no bit-width configurations"));
        }
        for &(a, w) in &self.configs {
            if !(2..=8).contains(&a) || !(2..=8).contains(&w) {
                return Err(Error::arg(format!("configuration A{a}W{w} outside 2..=8")));
            }
        }
        let mut seen = self.configs.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.configs.len() {
            return Err(Error::arg("duplicate bit-width configuration"));
        }
        if self.foldings.iter().any(|&(p, s)| p == 0 || s == 0) {
            return Err(Error::arg("pe and simd must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn train_config(&self, a: u8, w: u8) -> TrainConfig {
        TrainConfig::for_epochs(self.epochs, run_seed(self.seed, a, w))
    }

    fn shape(&self) -> MlpShape {
        MlpShape::with_hidden(&self.hidden)
    }
}

fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Seed of one sweep point; independent of scheduling order.
pub fn run_seed(base: u64, a_bits: u8, w_bits: u8) -> u64 {
    let d = digest(&format!("qnn-run-seed:{base}:{a_bits}:{w_bits}"));
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Identifies architecture, widths, hyperparameters, seed and data.
pub fn config_hash(plan: &SweepPlan, a: u8, w: u8, data: &DatasetHandle) -> String {
    let shape = plan.shape();
    let cfg = plan.train_config(a, w);
    let text = format!(
        "arch={}-{:?}-{};dropout={};a={a};w={w};epochs={};lr={};betas={},{};eps={};milestones={:?};gamma={};batch={};seed={};data={};train={};test={}",
        shape.inputs,
        shape.hidden,
        shape.classes,
        shape.dropout_p,
        cfg.epochs,
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.lr_milestones,
        cfg.lr_gamma,
        cfg.batch_size,
        cfg.seed,
        data.source,
        data.train.len(),
        data.test.len(),
    );
    digest(&text)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub name: String,
    pub abits: u8,
    pub wbits: u8,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub model: String,
    pub integer_model: String,
    pub checkpoint: String,
    pub log: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunManifest {
    pub rows: Vec<ManifestRow>,
}

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            rows: read_rows(path)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub name: String,
    pub abits: u8,
    pub wbits: u8,
    pub seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub name: String,
    pub abits: u8,
    pub wbits: u8,
    pub pe: Option<usize>,
    pub simd: Option<usize>,
    pub epoch: Option<usize>,
    pub metric: String,
    pub value: f64,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_accuracy(path: impl AsRef<Path>) -> Result<Vec<AccuracyRow>> {
    read_rows(path)
}

pub fn read_hardware(path: impl AsRef<Path>) -> Result<Vec<HardwareRow>> {
    read_rows(path)
}

pub fn read_long(path: impl AsRef<Path>) -> Result<Vec<LongRow>> {
    read_rows(path)
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Worker threads for independent runs; 1 runs them in order.
    pub parallel: usize,
    /// Stop every run after this many epochs, as if interrupted.
    pub stop_after: Option<usize>,
    pub budget: BoardBudget,
    pub cost: LogicCostModel,
    pub clock_mhz: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            parallel: 1,
            stop_after: None,
            budget: BoardBudget::pynq_z1(),
            cost: LogicCostModel::default(),
            clock_mhz: crate::hwsim::DEFAULT_CLOCK_MHZ,
        }
    }
}

/// What a sweep did for one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunAction {
    Reused,
    Resumed,
    Trained,
    Failed,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub manifest: RunManifest,
    pub actions: Vec<(String, RunAction)>,
}

impl SweepOutcome {
    pub fn all_done(&self) -> bool {
        self.manifest.rows.iter().all(|r| r.status == STATUS_DONE)
    }

    pub fn failures(&self) -> usize {
        self.manifest.rows.iter().filter(|r| r.status != STATUS_DONE).count()
    }
}

struct RunPaths {
    dir: PathBuf,
    model: PathBuf,
    integer: PathBuf,
    checkpoint: PathBuf,
    log: PathBuf,
    hash: PathBuf,
}

impl RunPaths {
    fn new(out: &Path, name: &str) -> Self {
        let dir = out.join("runs").join(name);
        Self {
            model: dir.join(MODEL_FILE),
            integer: dir.join(INTEGER_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            log: dir.join(LOG_FILE),
            hash: dir.join(HASH_FILE),
            dir,
        }
    }

    fn relative(&self, out: &Path, p: &Path) -> String {
        p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

fn run_point(
    plan: &SweepPlan,
    data: &DatasetHandle,
    opts: &SweepOptions,
    previous: Option<&ManifestRow>,
    a: u8,
    w: u8,
) -> (ManifestRow, RunAction) {
    let name = config_name(a, w);
    let paths = RunPaths::new(&plan.out_dir, &name);
    let hash = config_hash(plan, a, w, data);
    let mut row = ManifestRow {
        name: name.clone(),
        abits: a,
        wbits: w,
        seed: run_seed(plan.seed, a, w),
        config_hash: hash.clone(),
        status: String::new(),
        model: paths.relative(&plan.out_dir, &paths.model),
        integer_model: paths.relative(&plan.out_dir, &paths.integer),
        checkpoint: paths.relative(&plan.out_dir, &paths.checkpoint),
        log: paths.relative(&plan.out_dir, &paths.log),
    };
    let reusable = previous.is_some_and(|p| p.status == STATUS_DONE && p.config_hash == hash)
        && [&paths.model, &paths.integer, &paths.checkpoint, &paths.log]
            .iter()
            .all(|p| p.exists());
    if reusable {
        row.status = STATUS_DONE.into();
        return (row, RunAction::Reused);
    }
    match train_point(plan, data, opts, &paths, &hash, a, w) {
        Ok((finished, action)) => {
            row.status = if finished { STATUS_DONE } else { STATUS_INTERRUPTED }.into();
            (row, action)
        }
        Err(e) => {
            warn!("{name}: {e}");
            row.status = format!("failed: {e}");
            (row, RunAction::Failed)
        }
    }
}

fn train_point(
    plan: &SweepPlan,
    data: &DatasetHandle,
    opts: &SweepOptions,
    paths: &RunPaths,
    hash: &str,
    a: u8,
    w: u8,
) -> Result<(bool, RunAction)> {
    fs::create_dir_all(&paths.dir)?;
    let cfg = plan.train_config(a, w);
    let same_config = fs::read_to_string(&paths.hash).is_ok_and(|h| h.trim() == hash);
    let resume = if same_config && paths.checkpoint.exists() {
        Some(Checkpoint::load(&paths.checkpoint)?)
    } else {
        for p in [&paths.model, &paths.integer, &paths.checkpoint, &paths.log] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        write_atomic(&paths.hash, format!("{hash}\n").as_bytes())?;
        None
    };
    let trainer = Trainer::new(
        cfg.clone(),
        data,
        TrainOptions {
            out_dir: Some(paths.dir.clone()),
            keep_all_checkpoints: false,
            stop_after: opts.stop_after,
        },
    )?;
    let action = if resume.is_some() { RunAction::Resumed } else { RunAction::Trained };
    let (net, log) = match resume {
        Some(ckpt) => trainer.resume(ckpt)?,
        None => trainer.run(build_mlp_with(&plan.shape(), a, w, cfg.seed)?)?,
    };
    if log.records.len() < cfg.epochs {
        info!("{}: stopped after {} epochs", net.name, log.records.len());
        return Ok((false, action));
    }
    save_model(&net, &paths.model)?;
    streamline(&net)?.save(&paths.integer)?;
    Ok((true, action))
}

fn hardware_rows(plan: &SweepPlan, row: &ManifestRow, opts: &SweepOptions) -> Result<Vec<HardwareRow>> {
    let inet = crate::streamline::IntegerNetwork::load(plan.out_dir.join(&row.integer_model))?;
    let dims = NetworkDims::from_integer(&inet);
    plan.foldings
        .iter()
        .map(|&(pe, simd)| {
            let folding = FoldingConfig::uniform(&dims, pe, simd)?.with_clock(opts.clock_mhz);
            Ok(HardwareRow::from(&simulate(&inet, &folding, &opts.budget, &opts.cost)?))
        })
        .collect()
}

/// Trains, streamlines and simulates every configuration of `plan`,
/// reusing completed runs and resuming interrupted ones.
pub fn run_sweep(plan: &SweepPlan, data: &DatasetHandle, opts: &SweepOptions) -> Result<SweepOutcome> {
    plan.validate()?;
    let limited;
    let data = match plan.train_limit {
        Some(n) => {
            limited = data.clone().limit_train(n);
            &limited
        }
        None => data,
    };
    fs::create_dir_all(plan.out_dir.join("runs"))?;
    let manifest_path = plan.out_dir.join(MANIFEST_FILE);
    let previous: HashMap<String, ManifestRow> = if manifest_path.exists() {
        RunManifest::read(&manifest_path)?
            .rows
            .into_iter()
            .map(|r| (r.name.clone(), r))
            .collect()
    } else {
        HashMap::new()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(ManifestRow, RunAction)> = pool.install(|| {
        plan.configs
            .par_iter()
            .with_max_len(1)
            .map(|&(a, w)| run_point(plan, data, opts, previous.get(&config_name(a, w)), a, w))
            .collect()
    });

    let mut manifest = RunManifest::default();
    let mut actions = Vec::new();
    let mut accuracy = Vec::new();
    let mut hardware = Vec::new();
    for (mut row, action) in results {
        actions.push((row.name.clone(), action));
        if row.status == STATUS_DONE {
            let aggregated = crate::trainer::TrainLog::read_csv(plan.out_dir.join(&row.log))
                .and_then(|log| Ok((log, hardware_rows(plan, &row, opts)?)));
            match aggregated {
                Ok((log, hw)) => {
                    accuracy.extend(log.records.iter().map(|r| AccuracyRow {
                        name: row.name.clone(),
                        abits: row.abits,
                        wbits: row.wbits,
                        seed: row.seed,
                        epoch: r.epoch,
                        lr: r.lr,
                        train_loss: r.train_loss,
                        test_error: r.test_error,
                    }));
                    hardware.extend(hw);
                }
                Err(e) => row.status = format!("failed: {e}"),
            }
        }
        manifest.rows.push(row);
    }
    manifest.write(&manifest_path)?;
    write_rows(&plan.out_dir.join(ACCURACY_FILE), &accuracy)?;
    write_rows(&plan.out_dir.join(HARDWARE_FILE), &hardware)?;
    write_rows(&plan.out_dir.join(LONG_FILE), &long_rows(&accuracy, &hardware))?;
    Ok(SweepOutcome { manifest, actions })
}

/// Tidy rows for plotting: one metric value per line.
pub fn long_rows(accuracy: &[AccuracyRow], hardware: &[HardwareRow]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for r in accuracy {
        for (metric, value) in [("test_error", r.test_error), ("train_loss", r.train_loss), ("lr", r.lr)] {
            out.push(LongRow {
                name: r.name.clone(),
                abits: r.abits,
                wbits: r.wbits,
                pe: None,
                simd: None,
                epoch: Some(r.epoch),
                metric: metric.into(),
                value,
            });
        }
    }
    for r in hardware {
        for (metric, value) in [
            ("ii_cycles", r.ii_cycles as f64),
            ("img_per_s", r.img_per_s),
            ("dram_MB_s", r.dram_mb_s),
            ("luts", r.luts as f64),
            ("ffs", r.ffs as f64),
            ("bram18", r.bram18 as f64),
            ("fits", f64::from(u8::from(r.fits))),
        ] {
            out.push(LongRow {
                name: r.name.clone(),
                abits: r.abits,
                wbits: r.wbits,
                pe: Some(r.pe),
                simd: Some(r.simd),
                epoch: None,
                metric: metric.into(),
                value,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic;

    fn tiny_plan(dir: &Path) -> SweepPlan {
        SweepPlan {
            configs: vec![(2, 2), (2, 3), (3, 2), (3, 3)],
            foldings: vec![(2, 2), (16, 16)],
            hidden: vec![16, 16],
            epochs: 2,
            seed: 5,
            train_limit: Some(300),
            out_dir: dir.to_path_buf(),
        }
    }

    fn data() -> DatasetHandle {
        synthetic(1, 400, 100, 1024)
    }

    #[test]
    fn seeds_are_order_free_and_distinct() {
        assert_eq!(run_seed(1, 2, 3), run_seed(1, 2, 3));
        assert_ne!(run_seed(1, 2, 3), run_seed(1, 3, 2));
        assert_ne!(run_seed(1, 2, 3), run_seed(2, 2, 3));
    }

    #[test]
    fn full_plan_shape() {
        let p = SweepPlan::full("x", 100, 1);
        assert_eq!(p.configs.len(), 49);
        assert_eq!(p.foldings.len(), 9);
        p.validate().unwrap();
        let mut bad = p.clone();
        bad.configs.push((9, 2));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_inputs() {
        let p = tiny_plan(Path::new("x"));
        let d = data();
        let h = config_hash(&p, 2, 2, &d);
        assert_eq!(h, config_hash(&p, 2, 2, &d));
        assert_ne!(h, config_hash(&p, 2, 3, &d));
        let mut q = p.clone();
        q.epochs = 3;
        assert_ne!(h, config_hash(&q, 2, 2, &d));
    }

    #[test]
    fn mini_grid_runs_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(dir.path());
        let out = run_sweep(&plan, &data(), &SweepOptions::default()).unwrap();
        assert!(out.all_done());
        let acc = read_accuracy(dir.path().join(ACCURACY_FILE)).unwrap();
        assert_eq!(acc.len(), 4 * 2);
        assert_eq!(acc.iter().filter(|r| r.epoch == 1).count(), 4);
        let hw = read_hardware(dir.path().join(HARDWARE_FILE)).unwrap();
        assert_eq!(hw.len(), 4 * 2);
        assert!(!read_long(dir.path().join(LONG_FILE)).unwrap().is_empty());
        let master = fs::read(dir.path().join(ACCURACY_FILE)).unwrap();

        // Deleting one model file recomputes only that point.
        fs::remove_file(dir.path().join("runs/A2W3").join(MODEL_FILE)).unwrap();
        let again = run_sweep(&plan, &data(), &SweepOptions::default()).unwrap();
        let recomputed: Vec<_> = again
            .actions
            .iter()
            .filter(|(_, a)| *a != RunAction::Reused)
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(recomputed, ["A2W3"]);
        assert_eq!(fs::read(dir.path().join(ACCURACY_FILE)).unwrap(), master);
    }

    #[test]
    fn parallel_and_interrupted_sweeps_match_serial() {
        let serial = tempfile::tempdir().unwrap();
        run_sweep(&tiny_plan(serial.path()), &data(), &SweepOptions::default()).unwrap();

        let par = tempfile::tempdir().unwrap();
        let opts = SweepOptions {
            parallel: 3,
            ..SweepOptions::default()
        };
        run_sweep(&tiny_plan(par.path()), &data(), &opts).unwrap();

        let resumed = tempfile::tempdir().unwrap();
        let stop = SweepOptions {
            stop_after: Some(1),
            ..SweepOptions::default()
        };
        let first = run_sweep(&tiny_plan(resumed.path()), &data(), &stop).unwrap();
        assert_eq!(first.failures(), 4);
        let second = run_sweep(&tiny_plan(resumed.path()), &data(), &SweepOptions::default()).unwrap();
        assert!(second.actions.iter().all(|(_, a)| *a == RunAction::Resumed));

        for file in [ACCURACY_FILE, HARDWARE_FILE, LONG_FILE, MANIFEST_FILE] {
            let s = fs::read(serial.path().join(file)).unwrap();
            assert_eq!(s, fs::read(par.path().join(file)).unwrap(), "{file} parallel");
            assert_eq!(s, fs::read(resumed.path().join(file)).unwrap(), "{file} resumed");
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            rows: vec![ManifestRow {
                name: "A2W2".into(),
                abits: 2,
                wbits: 2,
                seed: 9,
                config_hash: "ab".into(),
                status: "failed: a, b".into(),
                model: "runs/A2W2/model.qnn".into(),
                integer_model: "runs/A2W2/model.qnni".into(),
                checkpoint: "c".into(),
                log: "l".into(),
            }],
        };
        let p = dir.path().join("m.csv");
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
    }
}
