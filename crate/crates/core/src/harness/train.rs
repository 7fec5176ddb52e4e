use std::fs::{self, File};
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::data::Dataset;
use super::{HarnessError, Result};
use crate::hcd::{cross_entropy, hcd_total_loss, kl_div, DistillNet, LossBreakdown, NetOutput};
use crate::nn::{Mode, ParamStore, Session, Sgd, StudentConfig, StudentNet, BN_MOMENTUM};
use crate::teacher::{self, TeacherDump};
use crate::tensor::{Graph, Tensor, Var};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.hcdp";
pub const METRICS_HEADER: &str = "epoch,ce,sub_ce,kl,sub_kl,orth,total,train_acc,test_acc,sec,seed";
const EVAL_BATCH: usize = 250;

/// One line of `metrics.csv`. Loss terms are sample-weighted epoch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub ce: f64,
    pub sub_ce: f64,
    pub kl: f64,
    pub sub_kl: f64,
    pub orth: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub sec: f64,
    pub seed: u64,
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub net: DistillNet,
    pub store: ParamStore,
}

impl TrainOutcome {
    pub fn final_test_acc(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.test_acc)
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        self.rows.iter().map(|r| r.sec).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Top-1 accuracy in percent of `[B, K]` logits.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    100.0 * count_correct(logits, labels) as f64 / labels.len() as f64
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count()
}

pub fn split_ranges(n: usize, test_count: usize) -> Result<(Range<usize>, Range<usize>)> {
    if test_count == 0 || test_count + 2 > n {
        return Err(HarnessError::Config(format!(
            "test_count {test_count} leaves no usable training split in {n} samples"
        )));
    }
    Ok((0..n - test_count, n - test_count..n))
}

/// Eval-mode top-1 accuracy of the student in `store` on `range`.
pub fn evaluate_student(
    student: &StudentNet,
    store: &ParamStore,
    data: &Dataset,
    range: Range<usize>,
) -> Result<f64> {
    let idx: Vec<usize> = range.collect();
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, store, Mode::Eval);
        let xv = s.graph.constant(x);
        let out = student.forward(&mut s, xv)?;
        correct += count_correct(s.graph.value(out.logits), &y);
    }
    Ok(100.0 * correct as f64 / idx.len() as f64)
}

/// Accuracy of a saved checkpoint on `range` of a dataset.
pub fn evaluate(checkpoint: &Path, data: &Dataset, range: Range<usize>) -> Result<f64> {
    let store = ParamStore::load(checkpoint)?;
    let student = StudentNet::from_store(&store, data.h, data.w)?;
    if student.config().in_channels != data.c || student.config().num_classes != data.k {
        return Err(HarnessError::Config(format!(
            "checkpoint expects {} channels and {} classes, dataset has {} and {}",
            student.config().in_channels,
            student.config().num_classes,
            data.c,
            data.k
        )));
    }
    evaluate_student(&student, &store, data, range)
}

fn method_loss(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    out: &NetOutput,
    zt: Option<Var>,
    labels: &[usize],
) -> Result<(Var, LossBreakdown)> {
    match cfg.method {
        Method::Ce => {
            let ce = cross_entropy(g, out.logits, labels)?;
            let v = g.value(ce).item();
            Ok((
                ce,
                LossBreakdown {
                    ce: v,
                    total: v,
                    ..Default::default()
                },
            ))
        }
        Method::Kd => {
            let h = &cfg.hcd;
            let zt = zt.expect("kd has teacher logits");
            let ce = cross_entropy(g, out.logits, labels)?;
            let kl = kl_div(g, zt, out.logits, h.tau)?;
            let a = g.scale(ce, h.alpha);
            let c = g.scale(kl, (1.0 - h.alpha) * h.tau * h.tau);
            let total = g.add(a, c)?;
            Ok((
                total,
                LossBreakdown {
                    ce: g.value(ce).item(),
                    kl: g.value(kl).item() * h.tau * h.tau,
                    total: g.value(total).item(),
                    ..Default::default()
                },
            ))
        }
        Method::Hcd => Ok(hcd_total_loss(
            g,
            out.logits,
            &out.shared,
            zt.expect("hcd has teacher logits"),
            labels,
            &cfg.hcd,
        )?),
    }
}

/// Network and freshly initialized parameters for a configuration.
pub fn build_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<(DistillNet, ParamStore)> {
    let student = StudentConfig {
        in_channels: data.c,
        height: data.h,
        width: data.w,
        num_classes: data.k,
        channels: cfg.channels.clone(),
    };
    let hcd = (cfg.method == Method::Hcd).then_some(&cfg.hcd);
    let net = DistillNet::new(student, hcd)?;
    let store = ParamStore::init(&net.param_specs(), cfg.seed)?;
    Ok((net, store))
}

/// Train in memory. `on_epoch` sees every row as soon as it is complete.
pub fn train_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    teacher: Option<&TeacherDump>,
    on_epoch: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.method.needs_teacher() {
        let t = teacher.ok_or_else(|| {
            HarnessError::Config(format!("method {} requires a teacher dump", cfg.method))
        })?;
        let d = if cfg.method == Method::Hcd {
            cfg.hcd.d
        } else {
            t.d
        };
        t.check_compat(data.n, d, data.k)?;
    }
    let (train_range, test_range) = split_ranges(data.n, cfg.test_count)?;
    let (net, mut store) = build_model(cfg, data)?;
    let mut opt = Sgd::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = train_range.collect();
    let mut rows = Vec::with_capacity(cfg.sgd.epochs);

    for epoch in 0..cfg.sgd.epochs {
        let start = Instant::now();
        let lr = cfg.sgd.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let (mut seen, mut correct) = (0usize, 0usize);
        for (bi, batch) in order.chunks(cfg.sgd.batch_size).enumerate() {
            // batch statistics need at least two values per channel
            if batch.len() < 2 {
                continue;
            }
            let (x, labels) = data.batch(batch);
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &store, Mode::Train);
            let xv = s.graph.constant(x);
            let (ft, zt) = match teacher.filter(|_| cfg.method.needs_teacher()) {
                Some(t) => {
                    let (f, z) = t.rows(batch);
                    (Some(s.graph.constant(f)), Some(s.graph.constant(z)))
                }
                None => (None, None),
            };
            let out = net.forward(&mut s, xv, ft)?;
            let (loss, br) = method_loss(s.graph, cfg, &out, zt, &labels)?;
            if let Some(term) = br.first_non_finite() {
                return Err(HarnessError::NonFinite {
                    epoch: epoch + 1,
                    batch: bi,
                    term,
                });
            }
            correct += count_correct(s.graph.value(out.logits), &labels);
            let mut grads = s.graph.backward(loss)?;
            let grads = s.collect_gradients(&mut grads)?;
            let bn = s.take_bn_updates();
            drop(s);
            opt.step(&mut store, grads, lr, &cfg.sgd)?;
            store.apply_bn_updates(&bn, BN_MOMENTUM);

            let w = batch.len() as f64;
            sums.ce += w * br.ce;
            sums.sub_ce += w * br.sub_ce;
            sums.kl += w * br.kl;
            sums.sub_kl += w * br.sub_kl;
            sums.orth += w * br.orth;
            sums.total += w * br.total;
            seen += batch.len();
        }
        let test_acc = evaluate_student(&net.student, &store, data, test_range.clone())?;
        let denom = seen.max(1) as f64;
        let row = MetricsRow {
            epoch: epoch + 1,
            ce: sums.ce / denom,
            sub_ce: sums.sub_ce / denom,
            kl: sums.kl / denom,
            sub_kl: sums.sub_kl / denom,
            orth: sums.orth / denom,
            total: sums.total / denom,
            train_acc: 100.0 * correct as f64 / denom,
            test_acc,
            sec: if cfg.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            seed: cfg.seed,
        };
        on_epoch(&row)?;
        rows.push(row);
    }
    Ok(TrainOutcome { rows, net, store })
}

struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        inner.write_record(METRICS_HEADER.split(','))?;
        inner.flush()?;
        Ok(Self { inner })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Load the inputs named in `cfg`, train, and write `metrics.csv` plus
/// `checkpoint.hcdp` into `cfg.out_dir`.
pub fn train(cfg: &ExperimentConfig, log: Option<&mut dyn std::io::Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.dataset)?;
    let dump = match (&cfg.teacher, cfg.method.needs_teacher()) {
        (Some(p), true) => Some(teacher::read_dump(p)?),
        _ => None,
    };
    train_to_dir(cfg, &data, dump.as_ref(), log)
}

/// [`train`] with inputs already in memory.
pub fn train_to_dir(
    cfg: &ExperimentConfig,
    data: &Dataset,
    dump: Option<&TeacherDump>,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut writer = MetricsWriter::create(&cfg.out_dir.join(METRICS_FILE))?;
    let outcome = train_with(cfg, data, dump, &mut |row| {
        writer.push(row)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "epoch {:>3}  total {:.4}  train {:.2}%  test {:.2}%  {:.1}s",
                row.epoch, row.total, row.train_acc, row.test_acc, row.sec
            )?;
        }
        Ok(())
    })?;
    outcome.store.save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}
