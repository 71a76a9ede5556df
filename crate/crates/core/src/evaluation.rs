//! Top-1 accuracy, probability-averaged ensembles, embedding export and the
//! run report.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::tensor::Tensor;

/// Samples per evaluation forward.
pub const EVAL_CHUNK: usize = 250;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `scores` whose argmax equals the label.
pub fn accuracy_from_scores(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidDataset("cannot score an empty evaluation set".into()));
    }
    if scores.rows() != labels.len() {
        return Err(Error::shape(&[labels.len(), scores.row_len()], scores.shape()));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(scores.row(r)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Evaluation-mode logits for every sample of `data`.
pub fn predict_logits(net: &Network, data: &Dataset) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("cannot evaluate on an empty set".into()));
    }
    if data.image_shape() != net.input_shape() {
        return Err(Error::shape(&net.input_shape(), &data.image_shape()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut chunks = Vec::new();
    for idx in indices.chunks(EVAL_CHUNK) {
        chunks.push(net.infer(&data.batch(idx))?.logits);
    }
    Tensor::stack_rows(&chunks.iter().collect::<Vec<_>>())
}

pub fn top1_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    accuracy_from_scores(&predict_logits(net, data)?, data.labels())
}

/// Row-wise softmax of each logit matrix, averaged over the members.
pub fn average_probabilities(logits: &[&Tensor]) -> Result<Tensor> {
    let first = logits
        .first()
        .ok_or_else(|| Error::Protocol("cannot ensemble zero networks".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for l in logits {
        l.ensure_shape(first.shape())?;
        for r in 0..l.rows() {
            let p = losses::softmax(l.row(r));
            for (a, q) in acc.row_mut(r).iter_mut().zip(p) {
                *a += q;
            }
        }
    }
    Ok(acc.scale(1.0 / logits.len() as f64))
}

pub fn ensemble_accuracy(nets: &[&Network], data: &Dataset) -> Result<f64> {
    check_ensemble(nets)?;
    let logits = nets.iter().map(|n| predict_logits(n, data)).collect::<Result<Vec<_>>>()?;
    let probs = average_probabilities(&logits.iter().collect::<Vec<_>>())?;
    accuracy_from_scores(&probs, data.labels())
}

fn check_ensemble(nets: &[&Network]) -> Result<()> {
    if nets.len() < 2 {
        return Err(Error::Config(format!("an ensemble needs ≥2 networks, got {}", nets.len())));
    }
    let k = nets[0].num_classes();
    if let Some(n) = nets.iter().find(|n| n.num_classes() != k) {
        return Err(Error::Config(format!(
            "ensemble members disagree on class count ({k} vs {})",
            n.num_classes()
        )));
    }
    Ok(())
}

/// Per-network accuracy, their mean, and the ensemble accuracy of a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_network: Vec<f64>,
    pub avg: f64,
    /// Absent for a single network.
    pub ens: Option<f64>,
}

impl Evaluation {
    pub fn of(nets: &[&Network], data: &Dataset) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::Config("nothing to evaluate".into()));
        }
        let logits = nets.iter().map(|n| predict_logits(n, data)).collect::<Result<Vec<_>>>()?;
        let per_network = logits
            .iter()
            .map(|l| accuracy_from_scores(l, data.labels()))
            .collect::<Result<Vec<_>>>()?;
        let ens = if nets.len() >= 2 {
            check_ensemble(nets)?;
            let probs = average_probabilities(&logits.iter().collect::<Vec<_>>())?;
            Some(accuracy_from_scores(&probs, data.labels())?)
        } else {
            None
        };
        Ok(Self {
            avg: per_network.iter().sum::<f64>() / per_network.len() as f64,
            per_network,
            ens,
        })
    }
}

/// Write `sample_id,label,f0,…` rows of globally pooled final features.
pub fn export_embeddings(net: &Network, data: &Dataset, path: &Path) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("cannot export an empty set".into()));
    }
    let channels = net.feature_shape()[0];
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = ["sample_id".to_owned(), "label".to_owned()]
        .into_iter()
        .chain((0..channels).map(|c| format!("f{c}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    for idx in indices.chunks(EVAL_CHUNK) {
        let feature = net.infer(&data.batch(idx))?.feature;
        let pooled = pool(&feature)?;
        for (r, &i) in idx.iter().enumerate() {
            write!(out, "{i},{}", data.label(i)).map_err(io)?;
            for v in pooled.row(r) {
                write!(out, ",{v}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Spatial mean of an `n×c×h×w` feature map.
pub fn pool(feature: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = feature.dims4()?;
    let plane = h * w;
    let data = feature
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// One epoch of the distillation loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub warmup: f64,
    pub losses: Vec<LossBreakdown>,
    pub evaluation: Option<Evaluation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub architectures: Vec<String>,
    /// Accuracy of the starting weights (after any pretraining).
    pub initial: Evaluation,
    /// Accuracy at the end of the run.
    pub last: Evaluation,
    pub history: Vec<EpochRecord>,
    /// SHA-256 of the canonical configuration.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

impl RunReport {
    pub fn per_network(&self) -> &[f64] {
        &self.last.per_network
    }

    pub fn avg(&self) -> f64 {
        self.last.avg
    }

    pub fn ens(&self) -> Option<f64> {
        self.last.ens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
