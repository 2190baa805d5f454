//! Training loop and split evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dkgh_core::loss::{load_balance_loss, objective};
use dkgh_core::metrics::{accuracy, macro_auc};
use dkgh_core::model::DkghNet;
use dkgh_core::moe::{batch_routing_stats, BranchKind, RoutingRecord};
use dkgh_core::nn::Module;
use dkgh_core::optim::{step_lr, AdamConfig, AdamState};
use dkgh_core::tape::softmax_slice;
use dkgh_core::{rng, DkghError, Real, Tape, Tensor};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{Error, IoContext, Result};
use crate::split::{Fold, UniformClassBatches};

/// Loss and metric summary of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMetrics {
    pub loss_cls: f64,
    pub loss_lb: f64,
    pub loss_total: f64,
    /// Percent.
    pub acc: f64,
    /// Macro one-vs-rest AUC of the softmax probabilities, percent; `None`
    /// when fewer than two classes are present.
    pub auc: Option<f64>,
    /// Top-1 usage per (block, branch), data-driven before domain-expert.
    pub frequencies: Vec<Vec<f64>>,
}

/// A forward pass over a whole split without parameter updates.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    /// Dataset positions, in evaluation order.
    pub indices: Vec<usize>,
    pub logits: Tensor<T>,
    /// `sample` holds the dataset position; ordered by sample, then block,
    /// then branch.
    pub records: Vec<RoutingRecord<T>>,
    pub metrics: SplitMetrics,
}

impl<T: Real> Evaluation<T> {
    /// Top-1 expert of every evaluated sample for one block and branch.
    pub fn top1(&self, block: usize, branch: BranchKind) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.block == block && r.branch == branch)
            .map(|r| r.top1())
            .collect()
    }
}

/// Runs the network over `indices` in chunks of `chunk` samples.
///
/// Routing statistics for the balancing term are taken over the whole split,
/// and the classification loss is the split mean.
pub fn evaluate<T: Real>(
    net: &DkghNet<T>,
    data: &Dataset<T>,
    indices: &[usize],
    lambda: f64,
    chunk: usize,
) -> Result<Evaluation<T>> {
    if indices.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let classes = net.config().num_classes;
    let mut logits = Vec::with_capacity(indices.len() * classes);
    let mut records = Vec::new();
    for part in indices.chunks(chunk.max(1)) {
        let batch = data.batch::<rng::SeedRng>(part, None)?;
        let mut tape = Tape::new();
        let img = tape.constant(batch.images);
        let hm = tape.constant(batch.heatmaps);
        let out = net.forward(&mut tape, img, hm)?;
        logits.extend_from_slice(tape.value(out.logits).data());
        let mut recs = out.records(&tape);
        recs.sort_by_key(|r| (r.sample, r.block, r.branch == BranchKind::DomainExpert));
        for mut r in recs {
            r.sample = part[r.sample];
            records.push(r);
        }
    }
    let logits = Tensor::new(&[indices.len(), classes], logits)?;
    let labels = data.labels(indices);

    let loss_cls = {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let ce = tape.cross_entropy(l, &labels)?;
        tape.value(ce).data()[0].as_f64()
    };
    let experts = net.config().num_experts;
    let mut loss_lb = 0.0;
    let mut frequencies = Vec::new();
    for block in 0..net.config().hybrid_blocks() {
        for branch in [BranchKind::DataDriven, BranchKind::DomainExpert] {
            let group: Vec<RoutingRecord<T>> = records
                .iter()
                .filter(|r| r.block == block && r.branch == branch)
                .cloned()
                .collect();
            let stats = batch_routing_stats(&group, experts)?;
            loss_lb += load_balance_loss(&stats.frequency, &stats.mean_probability)?.as_f64();
            frequencies.push(stats.frequency.iter().map(|v| v.as_f64()).collect());
        }
    }
    // class probabilities are comparable across samples, raw logits are not
    let probs: Vec<T> = logits.data().chunks_exact(classes).flat_map(softmax_slice).collect();
    let probs = Tensor::new(&[indices.len(), classes], probs)?;
    let auc = match macro_auc(&probs, &labels) {
        Ok(a) => Some(a),
        Err(DkghError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let metrics = SplitMetrics {
        loss_cls,
        loss_lb,
        loss_total: loss_cls + lambda * loss_lb,
        acc: accuracy(&logits, &labels)?,
        auc,
        frequencies,
    };
    Ok(Evaluation {
        indices: indices.to_vec(),
        logits,
        records,
        metrics,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: &'static str,
    pub metrics: SplitMetrics,
}

pub fn metrics_header(blocks: usize, experts: usize) -> String {
    let mut s = String::from("epoch,split,loss_cls,loss_lb,loss_total,acc,auc");
    for b in 0..blocks {
        for branch in ["DD", "DE"] {
            for i in 0..experts {
                write!(s, ",f_b{b}_{branch}_{i}").unwrap();
            }
        }
    }
    s
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        let auc = m.auc.map_or("nan".to_string(), |a| a.to_string());
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.split, m.loss_cls, m.loss_lb, m.loss_total, m.acc, auc
        );
        for v in m.frequencies.iter().flatten() {
            write!(s, ",{v}").unwrap();
        }
        s
    }
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters after the last epoch.
    pub last: DkghNet<T>,
    /// Parameters of the epoch with the best test AUC (earliest on ties).
    pub best: DkghNet<T>,
    pub best_epoch: usize,
    pub rows: Vec<MetricRow>,
}

impl<T> TrainOutcome<T> {
    pub fn row(&self, epoch: usize, split: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.epoch == epoch && r.split == split)
    }

    pub fn csv(&self, blocks: usize, experts: usize) -> String {
        let mut s = metrics_header(blocks, experts);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(DkghError) -> Error {
    move |e| match e {
        DkghError::NonFinite { .. } => Error::Diverged {
            epoch,
            batch,
            message: e.to_string(),
        },
        DkghError::Validation(ref m) if m.contains("non-finite") => Error::Diverged {
            epoch,
            batch,
            message: e.to_string(),
        },
        other => other.into(),
    }
}

/// Trains on `fold.train`, evaluating both splits before the first update
/// (epoch 0) and after every epoch. `on_epoch` sees each row as it is made.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    data: &Dataset<T>,
    fold: &Fold,
    on_epoch: &mut dyn FnMut(&MetricRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if fold.train.is_empty() || fold.test.is_empty() {
        return Err(Error::Config("fold has an empty train or test split".into()));
    }
    let mut net = DkghNet::<T>::new(cfg.model.clone())?;
    let mut adam = AdamState::new(&net, AdamConfig::default());
    let labels = data.labels(&fold.train);
    let mut sampler = UniformClassBatches::new(&labels, cfg.model.num_classes, cfg.batch_size, rng::stream(cfg.seed, 0x5a3))?;
    let mut aug_rng = rng::stream(cfg.seed, 0xa06);
    let steps_per_epoch = fold.train.len().div_ceil(cfg.batch_size);
    let chunk = cfg.batch_size;
    let lambda = T::lit(cfg.lambda);

    let mut rows = Vec::new();
    let mut record = |epoch: usize, net: &DkghNet<T>, rows: &mut Vec<MetricRow>| -> Result<Option<f64>> {
        let train = evaluate(net, data, &fold.train, cfg.lambda, chunk)?;
        let test = evaluate(net, data, &fold.test, cfg.lambda, chunk)?;
        let auc = test.metrics.auc;
        for (split, e) in [("train", train), ("test", test)] {
            let row = MetricRow {
                epoch,
                split,
                metrics: e.metrics,
            };
            on_epoch(&row);
            rows.push(row);
        }
        Ok(auc)
    };

    let score = |auc: Option<f64>| auc.unwrap_or(f64::NEG_INFINITY);
    let mut best_auc = score(record(0, &net, &mut rows)?);
    let mut best = net.clone();
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        // the schedule counts completed epochs, so the first stage has step_size epochs
        let lr = step_lr(epoch - 1, cfg.lr, cfg.step_size, cfg.gamma);
        for b in 0..steps_per_epoch {
            let picks: Vec<usize> = sampler.next().expect("endless sampler");
            let positions: Vec<usize> = picks.iter().map(|&i| fold.train[i]).collect();
            let aug = cfg.augment.enabled.then_some((&cfg.augment, &mut aug_rng));
            let batch = data.batch(&positions, aug)?;
            let on_err = diverged(epoch, b);
            net.zero_grad();
            {
                let mut tape = Tape::new();
                let img = tape.constant(batch.images);
                let hm = tape.constant(batch.heatmaps);
                let out = net.forward(&mut tape, img, hm).map_err(&on_err)?;
                let obj = objective(&mut tape, &out, &batch.labels, lambda).map_err(&on_err)?;
                let total = obj.breakdown.total.as_f64();
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        message: format!("loss is {total}"),
                    });
                }
                tape.backward(obj.total).map_err(&on_err)?;
            }
            adam.step(&mut net, lr).map_err(&on_err)?;
        }
        let auc = score(record(epoch, &net, &mut rows)?);
        if auc > best_auc {
            best_auc = auc;
            best = net.clone();
            best_epoch = epoch;
        }
    }
    net.zero_grad();
    best.zero_grad();
    Ok(TrainOutcome {
        last: net,
        best,
        best_epoch,
        rows,
    })
}

/// Writes `metrics.csv`, `checkpoint/` (best test AUC) and `last/`.
pub fn write_outputs<T: Real>(out_dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome<T>) -> Result<()> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let csv = outcome.csv(cfg.model.hybrid_blocks(), cfg.model.num_experts);
    let path = out_dir.join("metrics.csv");
    fs::write(&path, csv).at(&path)?;
    checkpoint::save(&out_dir.join("checkpoint"), &outcome.best, cfg)?;
    checkpoint::save(&out_dir.join("last"), &outcome.last, cfg)
}

/// Routing export: `sample_id,block_id,branch,raw_score_0..,top1_index,gate_p`.
pub fn routing_csv<T: Real>(eval: &Evaluation<T>, data: &Dataset<T>, experts: usize) -> String {
    let mut s = String::from("sample_id,block_id,branch");
    for i in 0..experts {
        write!(s, ",raw_score_{i}").unwrap();
    }
    s.push_str(",top1_index,gate_p\n");
    for r in &eval.records {
        write!(s, "{},{},{}", data.rows[r.sample].sample_id, r.block, r.branch).unwrap();
        for v in &r.raw_scores {
            write!(s, ",{}", v.as_f64()).unwrap();
        }
        writeln!(s, ",{},{}", r.top1(), r.gate.as_f64()).unwrap();
    }
    s
}
