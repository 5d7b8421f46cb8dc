//! End-to-end drivers behind the command-line tools.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{is_container, load_dataset, load_network};
use crate::config::{DatasetConfig, RunConfig};
use crate::data::{batches, epoch_seed, load_idx, make_synthetic, Dataset, Normalization, Split};
use crate::diagnostics::{export_report, ComparisonSummary, GradientProbe, ReportFormat, SeedComparison, VanishingReport};
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::train::{evaluate, train_loop, EpochReport, RunOutputs, TrainOutcome};

/// Raw train and test splits described by a dataset configuration.
pub fn load_splits(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    match cfg {
        DatasetConfig::Synthetic(spec) => make_synthetic(spec),
        DatasetConfig::Idx(f) => Ok((
            load_idx(&f.train_images, &f.train_labels, Split::Train)?,
            load_idx(&f.test_images, &f.test_labels, Split::Test)?,
        )),
        DatasetConfig::Cached(f) => Ok((load_dataset(&f.train)?, load_dataset(&f.test)?)),
    }
}

/// Normalized splits plus the statistics fitted on the training split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

impl PreparedData {
    pub fn load(cfg: &DatasetConfig) -> Result<Self> {
        let (train, test) = load_splits(cfg)?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Input("dataset splits must be non-empty".into()));
        }
        if train.images.shape()[1..] != test.images.shape()[1..] {
            return Err(Error::Consistency(format!(
                "train images {:?} and test images {:?} differ in shape",
                &train.images.shape()[1..],
                &test.images.shape()[1..]
            )));
        }
        let normalization = Normalization::fit(&train)?;
        Ok(PreparedData {
            train: normalization.apply(&train)?,
            test: normalization.apply(&test)?,
            normalization,
        })
    }

    pub fn classes(&self) -> usize {
        self.train.classes.max(self.test.classes)
    }
}

pub fn build_network(cfg: &RunConfig, data: &PreparedData, mode: Mode, seed: u64) -> Result<Network> {
    let spec = cfg.network.to_spec(
        data.train.channels(),
        data.train.image_size(),
        data.classes(),
        mode,
    )?;
    Network::build(spec, cfg.neuron.clone(), cfg.surrogate, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub final_acc: f64,
    pub final_lambda: f64,
    pub iterations: u64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub dir: Option<PathBuf>,
    pub outcome: TrainOutcome,
    pub summary: RunSummary,
}

/// Creates `dir`, refusing to reuse an existing one.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::State(format!(
            "run directory {} already exists; refusing to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trains one configuration. With `write` set, artifacts go to
/// [`RunConfig::run_dir`]: `config.json`, `metrics.csv`, `best.ckpt`,
/// `final.ckpt` and `summary.json`.
pub fn run_training(
    cfg: &RunConfig,
    write: bool,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainRun> {
    cfg.validate()?;
    let data = PreparedData::load(&cfg.dataset)?;
    let mut net = build_network(cfg, &data, cfg.mode, cfg.seed)?;
    let dir = if write {
        let dir = cfg.run_dir();
        fresh_dir(&dir)?;
        std::fs::write(dir.join("config.json"), cfg.to_json()).map_err(|e| Error::io(&dir, e))?;
        Some(dir)
    } else {
        None
    };
    let outputs = dir.as_deref().map(|d| RunOutputs {
        dir: d,
        normalization: Some(&data.normalization),
    });
    let start = Instant::now();
    let outcome = train_loop(&mut net, &data.train, &data.test, &cfg.trainer_config(), outputs, on_epoch)?;
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        best_acc: outcome.best_acc,
        best_epoch: outcome.best_epoch,
        final_acc: outcome.final_acc,
        final_lambda: outcome.final_lambda,
        iterations: outcome.metrics.len() as u64,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = &dir {
        write_json(&d.join("summary.json"), &summary)?;
    }
    Ok(TrainRun { dir, outcome, summary })
}

/// One vanilla and one shortcut gradient report for `seed`, both built from
/// the same main-path initialization and the same training batch.
pub fn diagnose_seed(
    cfg: &RunConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<(VanishingReport, VanishingReport)> {
    let batch = batches(&data.train, cfg.trainer.batch, epoch_seed(seed, 0))?
        .next()
        .expect("non-empty training set has a batch");
    let mut out = Vec::with_capacity(2);
    for (mode, lambda) in [(Mode::Vanilla, 0.0), (Mode::Shortcut, cfg.trainer.lambda0)] {
        let net = build_network(cfg, data, mode, seed)?;
        let mut probe = GradientProbe::new(net, lambda);
        probe.backward(&batch.images, &batch.labels)?;
        out.push(probe.capture(seed)?);
    }
    let shortcut = out.pop().expect("two reports");
    let vanilla = out.pop().expect("two reports");
    Ok((vanilla, shortcut))
}

/// Worker count for per-seed jobs: `SPIKESHORT_THREADS` if set, otherwise
/// the available parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("SPIKESHORT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("SPIKESHORT_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs [`diagnose_seed`] for every seed on up to `threads` workers. With
/// `dir` set, writes `s{seed}-vanilla.json`, `s{seed}-shortcut.json` and
/// `summary.json` there.
pub fn run_diagnose(
    cfg: &RunConfig,
    seeds: &[u64],
    dir: Option<&Path>,
    threads: usize,
) -> Result<ComparisonSummary> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Input("at least one seed is required".into()));
    }
    let data = PreparedData::load(&cfg.dataset)?;
    if let Some(d) = dir {
        fresh_dir(d)?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedComparison>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        if k >= seeds.len() {
            break;
        }
        let seed = seeds[k];
        let r = diagnose_seed(cfg, &data, seed).and_then(|(v, s)| {
            if let Some(d) = dir {
                export_report(&v, &d.join(format!("s{seed}-vanilla.json")), ReportFormat::Json)?;
                export_report(&s, &d.join(format!("s{seed}-shortcut.json")), ReportFormat::Json)?;
            }
            Ok(SeedComparison::new(seed, &v, &s))
        });
        results.lock().expect("no worker panicked")[k] = Some(r);
    };
    std::thread::scope(|scope| {
        for _ in 1..threads.clamp(1, seeds.len()) {
            scope.spawn(work);
        }
        work();
    });
    let per_seed = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    let summary = ComparisonSummary::new(per_seed);
    if let Some(d) = dir {
        write_json(&d.join("summary.json"), &summary)?;
    }
    Ok(summary)
}

/// Directory for a diagnose run: `{out}/{hash[..16]}-diagnose`.
pub fn diagnose_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(format!("{}-diagnose", &cfg.hash()[..16]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub samples: usize,
    pub timesteps: usize,
}

/// Loads an evaluation set: a dataset container, or a dataset configuration
/// JSON whose test split is used.
pub fn load_eval_dataset(path: &Path) -> Result<Dataset> {
    if is_container(path) {
        return load_dataset(path);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: DatasetConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    Ok(load_splits(&cfg)?.1)
}

/// Accuracy of a checkpoint on a dataset, applying the normalization stored
/// with the checkpoint.
pub fn run_eval(checkpoint: &Path, dataset: &Path, timesteps: Option<usize>) -> Result<EvalResult> {
    let (mut net, meta) = load_network(checkpoint)?;
    if let Some(t) = timesteps {
        net.set_timesteps(t)?;
    }
    let raw = load_eval_dataset(dataset)?;
    let data = match &meta.normalization {
        Some(n) => n.apply(&raw)?,
        None => raw,
    };
    let accuracy = evaluate(&net, &data)?;
    Ok(EvalResult {
        accuracy,
        samples: data.len(),
        timesteps: net.spec().timesteps,
    })
}
