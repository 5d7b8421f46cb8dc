use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind};
use super::schedule::{cosine_lr, ScheduleState};
use crate::autodiff::{cross_entropy, Graph};
use crate::checkpoint::save_network;
use crate::data::{batches, epoch_seed, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::network::{combine_outputs, Mode, Network};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Cosine decay from the base rate to zero over all iterations.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    /// Initial side-branch weight.
    pub lambda0: f64,
    /// Use `CE(b_n) + lambda * sum CE(b_l)` instead of the CE of the
    /// combined output.
    pub per_branch_loss: bool,
    /// Set from the run configuration.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub mode: Mode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 0.01,
            weight_decay: 0.02,
            batch: 64,
            epochs: 30,
            optimizer: OptimizerKind::Adamw,
            lr_schedule: LrSchedule::Cosine,
            lambda0: 0.25,
            per_branch_loss: false,
            seed: 0,
            mode: Mode::Evolutionary,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return Err(Error::Config(format!(
                "lambda0 must be non-negative, got {}",
                self.lambda0
            )));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based count of completed steps.
    pub iteration: u64,
    /// 1-based epoch.
    pub epoch: usize,
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Cross-entropy of each block output `b_1 .. b_n` present in the pass.
    pub branch_losses: Vec<f64>,
    /// Test accuracy, set on the last step of each epoch.
    pub acc: Option<f64>,
    /// L2 norm of each main-path conv weight gradient, input to output.
    pub grad_l2: Vec<f64>,
}

/// Runs one iteration: forward, lambda update, combine, loss, backward and
/// optimizer step, in that order. Advances `sched.i` by one.
pub fn train_step(
    net: &mut Network,
    opt: &mut Optimizer,
    sched: &mut ScheduleState,
    cfg: &TrainerConfig,
    images: &Tensor,
    labels: &[usize],
) -> Result<MetricsRecord> {
    if !net.is_training() {
        return Err(Error::State("train_step requires training mode".into()));
    }
    let mut g = Graph::new();
    let trace = net.forward_train(&mut g, images)?;
    let lambda = sched.advance(cfg.mode)?;
    let iteration = sched.i;

    let loss = if cfg.per_branch_loss {
        let main = g.softmax_cross_entropy(trace.main(), labels)?;
        if lambda == 0.0 || trace.side().is_empty() {
            main
        } else {
            let mut side = g.softmax_cross_entropy(trace.side()[0], labels)?;
            for &b in &trace.side()[1..] {
                let ce = g.softmax_cross_entropy(b, labels)?;
                side = g.add(side, ce)?;
            }
            let weighted = g.scale(side, lambda);
            g.add(main, weighted)?
        }
    } else {
        let out = combine_outputs(&mut g, &trace, lambda)?;
        g.softmax_cross_entropy(out, labels)?
    };
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric {
            iteration,
            what: format!("training loss is {loss_value}"),
        });
    }
    let branch_losses = trace
        .b
        .iter()
        .map(|&b| cross_entropy(g.value(b), labels))
        .collect::<Result<Vec<_>>>()?;

    net.params_mut().zero_grad();
    g.backward(loss, net.params_mut())?;
    let grad_l2 = net
        .main_conv_layers()
        .iter()
        .map(|name| {
            let id = net.params().find(&format!("{name}.weight")).expect("conv weight exists");
            net.params().get(id).grad.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect::<Vec<_>>();
    if let Some(bad) = grad_l2.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            iteration,
            what: format!("gradient of conv layer {} is not finite", bad + 1),
        });
    }

    let lr = match cfg.lr_schedule {
        LrSchedule::Cosine => cosine_lr(iteration - 1, sched.total, cfg.lr),
    };
    opt.step(net.params_mut(), lr)?;

    Ok(MetricsRecord {
        iteration,
        epoch: 0,
        loss: loss_value,
        lambda,
        lr,
        branch_losses,
        acc: None,
        grad_l2,
    })
}

/// Fraction of samples whose main-path argmax matches the label.
///
/// Runs without a tape and without side heads, using running batch-norm
/// statistics.
pub fn evaluate(net: &Network, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let eval_copy;
    let net = if net.is_training() {
        let mut n = net.clone();
        n.set_training(false);
        eval_copy = n;
        &eval_copy
    } else {
        net
    };
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..d.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = d.gather(chunk);
        let logits = net.forward_infer(&images)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("inference logits".into()));
        }
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / d.len() as f64)
}

pub fn iterations_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// CSV sink for [`MetricsRecord`]s. Columns are
/// `iteration,epoch,loss,lambda,lr,acc,branch_loss_1..branch_loss_k`.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    branches: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, branches: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            branches,
        };
        let mut header = String::from("iteration,epoch,loss,lambda,lr,acc");
        for k in 1..=branches {
            header.push_str(&format!(",branch_loss_{k}"));
        }
        w.line(&header)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        if r.branch_losses.len() != self.branches {
            return Err(Error::State(format!(
                "record has {} branch losses, header has {}",
                r.branch_losses.len(),
                self.branches
            )));
        }
        let acc = r.acc.map(|a| a.to_string()).unwrap_or_default();
        let mut s = format!(
            "{},{},{},{},{},{}",
            r.iteration, r.epoch, r.loss, r.lambda, r.lr, acc
        );
        for b in &r.branch_losses {
            s.push_str(&format!(",{b}"));
        }
        self.line(&s)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Where a training run writes its artifacts.
#[derive(Clone, Copy, Debug)]
pub struct RunOutputs<'a> {
    pub dir: &'a Path,
    /// Stored in checkpoints so evaluation can reproduce preprocessing.
    pub normalization: Option<&'a Normalization>,
}

/// Summary handed to the per-epoch callback.
#[derive(Clone, Copy, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lambda: f64,
    pub acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub epoch_acc: Vec<f64>,
    pub best_acc: f64,
    /// 1-based epoch of the best accuracy, earliest on ties.
    pub best_epoch: usize,
    pub final_acc: f64,
    pub final_lambda: f64,
}

/// Trains for `cfg.epochs` epochs, evaluating on `test` after each.
///
/// With `outputs` set, writes `metrics.csv`, `best.ckpt` and `final.ckpt`
/// into the run directory. On a numeric abort the metrics of completed
/// steps are still written before the error is returned.
pub fn train_loop(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainerConfig,
    outputs: Option<RunOutputs<'_>>,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let per_epoch = iterations_per_epoch(train.len(), cfg.batch);
    let total = (per_epoch * cfg.epochs) as u64;
    let mut sched = ScheduleState::new(cfg.lambda0, total);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let branches = 1 + net.side_head_count();
    let mut writer = match outputs {
        Some(o) => Some(MetricsWriter::create(&o.dir.join("metrics.csv"), branches)?),
        None => None,
    };

    net.set_training(true);
    let mut metrics: Vec<MetricsRecord> = Vec::with_capacity(total as usize);
    let mut epoch_acc = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize)> = None;
    for epoch in 1..=cfg.epochs {
        let epoch_start = metrics.len();
        let mut step_err = None;
        for batch in batches(train, cfg.batch, epoch_seed(cfg.seed, epoch - 1))? {
            match train_step(net, &mut opt, &mut sched, cfg, &batch.images, &batch.labels) {
                Ok(mut r) => {
                    r.epoch = epoch;
                    metrics.push(r);
                }
                Err(e) => {
                    step_err = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = step_err {
            if let Some(w) = writer.as_mut() {
                for r in &metrics[epoch_start..] {
                    w.write(r)?;
                }
                w.flush()?;
            }
            return Err(e);
        }

        net.set_training(false);
        let acc = evaluate(net, test)?;
        net.set_training(true);
        epoch_acc.push(acc);
        metrics.last_mut().expect("epoch has at least one step").acc = Some(acc);
        if let Some(w) = writer.as_mut() {
            for r in &metrics[epoch_start..] {
                w.write(r)?;
            }
            w.flush()?;
        }
        if best.is_none_or(|(b, _)| acc > b) {
            best = Some((acc, epoch));
            if let Some(o) = outputs {
                save_network(net, o.normalization, &o.dir.join("best.ckpt"))?;
            }
        }
        let steps = &metrics[epoch_start..];
        on_epoch(&EpochReport {
            epoch,
            mean_loss: steps.iter().map(|r| r.loss).sum::<f64>() / steps.len() as f64,
            lambda: steps.last().map_or(0.0, |r| r.lambda),
            acc,
        });
    }
    net.set_training(false);
    if let Some(o) = outputs {
        save_network(net, o.normalization, &o.dir.join("final.ckpt"))?;
    }
    let (best_acc, best_epoch) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_acc: *epoch_acc.last().expect("at least one epoch"),
        final_lambda: metrics.last().map_or(0.0, |r| r.lambda),
        metrics,
        epoch_acc,
        best_acc,
        best_epoch,
    })
}
