//! Experiment lifecycle: cross-entropy pretraining, the distillation loop,
//! metrics, checkpoints and resumption.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::{Mode, Network};
use crate::checkpoint::Checkpoint;
use crate::cohort::{Cohort, StepStreams};
use crate::config::ExperimentConfig;
use crate::data::{Augment, Dataset, Splits};
use crate::error::{Error, Result};
use crate::evaluation::{EpochRecord, Evaluation, RunReport};
use crate::graph::Graph;
use crate::losses::{self, LossBreakdown};
use crate::optim::Sgd;
use crate::sampling::{sample_batch, Quadruple, RandomStream};
use crate::tensor::Tensor;

/// Step learning-rate schedule and the optimizer constants that go with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidHyperparameter {
                name: "lr",
                value: self.initial_lr,
                reason: "must be positive",
            });
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::InvalidHyperparameter {
                name: "decay_factor",
                value: self.decay_factor,
                reason: "must be positive",
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidHyperparameter {
                name: "momentum",
                value: self.momentum,
                reason: "must lie in [0, 1)",
            });
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidHyperparameter {
                name: "weight_decay",
                value: self.weight_decay,
                reason: "must be non-negative",
            });
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "decay epochs {:?} must be strictly increasing",
                self.decay_epochs
            )));
        }
        if let Some(&last) = self.decay_epochs.last() {
            if last >= self.total_epochs {
                return Err(Error::Config(format!(
                    "decay epoch {last} is not before the last epoch ({} total)",
                    self.total_epochs
                )));
            }
        }
        Ok(())
    }

    /// `initial_lr · decay_factor^(decays at or before epoch)`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Schedule {
                epoch,
                total: self.total_epochs,
            });
        }
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        Ok(self.initial_lr * self.decay_factor.powi(decays as i32))
    }

    pub fn optimizer(&self) -> Sgd {
        Sgd::new(self.initial_lr, self.momentum, self.weight_decay)
    }
}

/// Loss of one cross-entropy step, before and (optionally) after the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub before: f64,
    pub after: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainOptions {
    pub batch_size: usize,
    pub augment: Augment,
    /// Recompute the batch loss after each update (costs a forward).
    pub track_after: bool,
}

/// Number of optimizer steps in one pass over `len` images.
pub fn steps_per_epoch(len: usize, batch_size: usize) -> usize {
    (len / batch_size).max(1)
}

/// Mean cross-entropy of `net` on one batch, as a tape.
fn batch_loss(net: &Network, x: &Tensor, labels: &[usize], mode: Mode) -> Result<(Graph, crate::backbone::Binding, crate::graph::Var)> {
    let mut g = Graph::new();
    let mut bind = net.bind(&mut g, mode, true);
    let xv = g.constant(x.clone());
    let rec = net.forward(&mut g, &mut bind, xv)?;
    let k = net.num_classes();
    let targets = Tensor::from_fn(&[labels.len(), k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 });
    let loss = g.soft_cross_entropy(rec.logits, &targets, &vec![1.0 / labels.len() as f64; labels.len()])?;
    Ok((g, bind, loss))
}

/// One cross-entropy update; returns the pre-update batch loss.
pub fn ce_step(net: &mut Network, opt: &mut Sgd, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let (g, bind, loss) = batch_loss(net, x, labels, Mode::Train)?;
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor> = bind
        .params()
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    net.absorb_statistics(&bind);
    opt.step(net.params_mut(), &grads)?;
    Ok(g.value(loss).item())
}

fn shuffled(len: usize, rng: &mut RandomStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    idx
}

fn augmented_batch(data: &Dataset, indices: &[usize], augment: &Augment, rng: &mut RandomStream) -> Result<Tensor> {
    if augment.is_identity() {
        return Ok(data.batch(indices));
    }
    let images: Vec<Tensor> = indices.iter().map(|&i| augment.apply(&data.image(i), rng)).collect();
    Tensor::stack(&images.iter().collect::<Vec<_>>())
}

/// Cross-entropy training of a single network over `schedule`.
pub fn pretrain(
    net: &mut Network,
    data: &Dataset,
    schedule: &Schedule,
    opts: &PretrainOptions,
    rng: &mut RandomStream,
) -> Result<Vec<StepLoss>> {
    if schedule.total_epochs == 0 {
        return Ok(Vec::new());
    }
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidDataset("cannot train on an empty set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = schedule.optimizer();
    let batch = opts.batch_size.min(data.len());
    let mut log = Vec::new();
    for epoch in 0..schedule.total_epochs {
        opt.lr = schedule.lr_at(epoch)?;
        let order = shuffled(data.len(), rng);
        for s in 0..steps_per_epoch(data.len(), batch) {
            let idx = &order[s * batch..(s + 1) * batch];
            let x = augmented_batch(data, idx, &opts.augment, rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
            let before = ce_step(net, &mut opt, &x, &labels)?;
            let after = if opts.track_after {
                let (g, _, loss) = batch_loss(net, &x, &labels, Mode::Train)?;
                Some(g.value(loss).item())
            } else {
                None
            };
            log.push(StepLoss { before, after });
        }
    }
    Ok(log)
}

/// Train and test splits with the configured per-class subsets applied.
pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    let Splits { mut train, mut test } = config.dataset_source()?.load()?;
    if config.train_per_class > 0 {
        train = train.balanced_prefix(config.train_per_class)?;
    }
    if config.test_per_class > 0 {
        test = test.balanced_prefix(config.test_per_class)?;
    }
    if train.image_shape() != test.image_shape() || train.num_classes() != test.num_classes() {
        return Err(Error::InvalidDataset("train and test splits disagree on shape or classes".into()));
    }
    Ok(Splits { train, test })
}

/// Freshly initialized cohort members, in config order.
pub fn init_networks(config: &ExperimentConfig, data: &Dataset) -> Result<Vec<Network>> {
    let mut rng = RandomStream::new(config.seed, "init");
    config
        .architectures
        .iter()
        .map(|&arch| Network::new(arch, data.image_shape(), data.num_classes(), &mut rng))
        .collect()
}

fn pretrain_options(config: &ExperimentConfig) -> PretrainOptions {
    PretrainOptions {
        batch_size: config.batch_size,
        augment: config.augment(),
        track_after: false,
    }
}

/// Each network of the config trained alone with cross-entropy for the full
/// distillation budget (`epochs`, same schedule and batch size).
pub fn train_independent(config: &ExperimentConfig, splits: &Splits) -> Result<(Vec<Network>, Evaluation)> {
    config.validate()?;
    let mut nets = init_networks(config, &splits.train)?;
    for (i, net) in nets.iter_mut().enumerate() {
        let mut rng = RandomStream::new(config.seed, &format!("independent/{i}"));
        pretrain(net, &splits.train, &config.schedule(), &pretrain_options(config), &mut rng)?;
    }
    let eval = Evaluation::of(&nets.iter().collect::<Vec<_>>(), &splits.test)?;
    Ok((nets, eval))
}

/// Where a run keeps its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained.ckpt")
    }

    /// Checkpoint taken after `epochs` completed epochs.
    pub fn checkpoint(&self, epochs: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch-{epochs:04}.ckpt"))
    }
}

pub const METRICS_HEADER: &str = "epoch,net_id,loss_cls,loss_m_logit,loss_fea,loss_e_logit,loss_total,warmup,lr,test_acc";

fn metrics_rows(rec: &EpochRecord) -> Vec<String> {
    let acc = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
    let mut rows: Vec<String> = rec
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| {
            format!(
                "{},{i},{},{},{},{},{},{},{},{}",
                rec.epoch,
                l.cls,
                l.m_logit,
                l.fea,
                l.e_logit,
                l.total,
                rec.warmup,
                rec.lr,
                acc(rec.evaluation.as_ref().map(|e| e.per_network[i]))
            )
        })
        .collect();
    rows.push(format!(
        "{},ens,,,,,,{},{},{}",
        rec.epoch,
        rec.warmup,
        rec.lr,
        acc(rec.evaluation.as_ref().and_then(|e| e.ens))
    ));
    rows
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        cls: sum(|b| b.cls),
        m_logit: sum(|b| b.m_logit),
        fea: sum(|b| b.fea),
        e_logit: sum(|b| b.e_logit),
        warmup: steps.first().map_or(0.0, |b| b.warmup),
        total: sum(|b| b.total),
    }
}

/// Augment the four real images of every quadruple.
pub fn augment_batch(batch: Vec<Quadruple>, augment: &Augment, rng: &mut RandomStream) -> Result<Vec<Quadruple>> {
    if augment.is_identity() {
        return Ok(batch);
    }
    batch
        .into_iter()
        .map(|q| {
            let c1 = augment.apply(&q.c1, rng);
            let c2 = augment.apply(&q.c2, rng);
            let d1 = augment.apply(&q.d1, rng);
            let d2 = augment.apply(&q.d2, rng);
            let items = q.items;
            let mut out = Quadruple::new([c1, c2], [d1, d2], q.class_c, q.class_d)?;
            out.items = items;
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
}

/// Run the configured experiment end to end.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    run_with(config, &RunOptions::default())
}

pub fn run_with(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    if config.architectures.len() < 2 {
        return Err(Error::Config("distillation needs ≥2 architectures".into()));
    }
    let splits = load_splits(config)?;
    run_on(config, &splits, opts)
}

/// [`run_with`] on already loaded data.
pub fn run_on(config: &ExperimentConfig, splits: &Splits, opts: &RunOptions) -> Result<RunReport> {
    let paths = RunPaths::new(&config.out_dir);
    fs::create_dir_all(paths.root.join("checkpoints")).map_err(|e| Error::io(&paths.root, e))?;
    config.save(&paths.config())?;
    let schedule = config.schedule();
    let (train, test) = (&splits.train, &splits.test);

    let (networks, optimizers, mut sampler, mut augment_rng, mut streams, start) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.identity() != config.identity() {
                return Err(Error::Consistency(format!(
                    "{} was written by a different configuration",
                    path.display()
                )));
            }
            info!("resuming from {} at epoch {}", path.display(), ck.epoch);
            let sampler = ck.stream("sampler")?;
            let augment = ck.stream("augment")?;
            let streams = StepStreams::restore(&ck.streams)?;
            (ck.networks, Some(ck.optimizers), sampler, augment, streams, ck.epoch)
        }
        None => {
            let mut nets = init_networks(config, train)?;
            if config.pretrain_epochs > 0 {
                for (i, net) in nets.iter_mut().enumerate() {
                    let mut rng = RandomStream::new(config.seed, &format!("pretrain/{i}"));
                    pretrain(net, train, &config.pretrain_schedule(), &pretrain_options(config), &mut rng)?;
                }
                Checkpoint {
                    epoch: 0,
                    config: config.clone(),
                    streams: Vec::new(),
                    optimizers: nets.iter().map(|_| config.schedule().optimizer()).collect(),
                    networks: nets.clone(),
                }
                .save(&paths.pretrained())?;
            }
            (
                nets,
                None,
                RandomStream::new(config.seed, "sampler"),
                RandomStream::new(config.seed, "augment"),
                StepStreams::new(config.seed),
                0,
            )
        }
    };

    let mut cohort = Cohort::new(
        networks,
        schedule.optimizer(),
        config.hp(),
        config.alpha1,
        config.alpha2,
        config.flags(),
    )?;
    if let Some(opt) = optimizers {
        cohort.optimizers = opt;
    }
    let initial = Evaluation::of(&cohort.networks.iter().collect::<Vec<_>>(), test)?;
    let mut last = initial.clone();

    let metrics_path = paths.metrics();
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;

    let augment = config.augment();
    let steps = steps_per_epoch(train.len(), config.batch_size);
    let mut history = Vec::new();
    for epoch in start..config.epochs {
        let lr = schedule.lr_at(epoch)?;
        cohort.set_lr(lr);
        let warmup = losses::warmup_factor(epoch, config.warmup_epochs);
        let mut per_step: Vec<Vec<LossBreakdown>> = vec![Vec::with_capacity(steps); cohort.len()];
        for _ in 0..steps {
            let batch = sample_batch(&mut sampler, train, config.batch_size)?;
            let batch = augment_batch(batch, &augment, &mut augment_rng)?;
            for (acc, b) in per_step.iter_mut().zip(cohort.train_step(&batch, &mut streams, epoch)?) {
                acc.push(b);
            }
        }
        let done = epoch + 1;
        let evaluation = if done % config.eval_every == 0 || done == config.epochs {
            let e = Evaluation::of(&cohort.networks.iter().collect::<Vec<_>>(), test)?;
            last = e.clone();
            Some(e)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            warmup,
            losses: per_step.iter().map(|s| mean_breakdown(s)).collect(),
            evaluation,
        };
        for row in metrics_rows(&record) {
            writeln!(metrics, "{row}").map_err(io)?;
        }
        metrics.flush().map_err(io)?;
        info!(
            "epoch {epoch}: lr {lr} warmup {warmup} loss {:?} acc {:?}",
            record.losses.iter().map(|l| l.total).collect::<Vec<_>>(),
            record.evaluation.as_ref().map(|e| (&e.per_network, e.ens))
        );
        history.push(record);

        let periodic = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
        if periodic || done == config.epochs {
            let mut states = vec![sampler.state(), augment_rng.state()];
            states.extend(streams.states());
            Checkpoint {
                epoch: done,
                config: config.clone(),
                streams: states,
                networks: cohort.networks.clone(),
                optimizers: cohort.optimizers.clone(),
            }
            .save(&paths.checkpoint(done))?;
        }
    }

    let mut seeds = BTreeMap::new();
    seeds.insert("seed".to_owned(), config.seed);
    if config.dataset == "synthetic" {
        seeds.insert("synthetic_seed".to_owned(), config.synthetic_seed);
    }
    let report = RunReport {
        architectures: config.architectures.iter().map(|a| a.to_string()).collect(),
        initial,
        last,
        history,
        config_hash: config.hash(),
        seeds,
    };
    report.save(&paths.report())?;
    Ok(report)
}

/// One point of an (α₁, α₂) sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha1: f64,
    pub alpha2: f64,
    pub avg: f64,
    pub ens: Option<f64>,
}

pub const ALPHA_GRID: [f64; 5] = [0.1, 0.2, 0.5, 1.0, 2.0];

/// The (α₁, α₂) pairs of a sweep: with `full`, the whole grid; otherwise
/// each α varied over the grid with the other held at its configured value.
pub fn sweep_pairs(config: &ExperimentConfig, grid: &[f64], full: bool) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    if full {
        for &a1 in grid {
            for &a2 in grid {
                pairs.push((a1, a2));
            }
        }
    } else {
        pairs.extend(grid.iter().map(|&a1| (a1, config.alpha2)));
        pairs.extend(
            grid.iter()
                .filter(|&&a2| a2 != config.alpha2)
                .map(|&a2| (config.alpha1, a2)),
        );
    }
    pairs
}

/// Run the experiment once per (α₁, α₂) pair, each in its own subdirectory.
pub fn sweep_alpha(config: &ExperimentConfig, pairs: &[(f64, f64)]) -> Result<Vec<SweepPoint>> {
    config.validate()?;
    let splits = load_splits(config)?;
    pairs
        .iter()
        .map(|&(alpha1, alpha2)| {
            let cfg = ExperimentConfig {
                alpha1,
                alpha2,
                out_dir: config.out_dir.join(format!("alpha1-{alpha1}_alpha2-{alpha2}")),
                ..config.clone()
            };
            let report = run_on(&cfg, &splits, &RunOptions::default())?;
            Ok(SweepPoint {
                alpha1,
                alpha2,
                avg: report.avg(),
                ens: report.ens(),
            })
        })
        .collect()
}
