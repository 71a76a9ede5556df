//! One distillation step over a cohort of networks.
//!
//! Every network runs its plain and mixed forwards once per step. Each network
//! then plays the student against the mean of the others (the peer-teacher),
//! whose outputs enter its loss as constants. All gradients are computed
//! against the step-start parameters and applied afterwards, so the order in
//! which roles rotate does not matter.

use serde::{Deserialize, Serialize};

use crate::backbone::{Binding, ForwardRecord, Mode, Network, TapeRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, KdHyperparams, LossBreakdown, LossParts};
use crate::mixing::{self, MixMask};
use crate::optim::Sgd;
use crate::sampling::{sample_beta, Quadruple, RandomStream, StreamState};
use crate::tensor::Tensor;

/// Which mixing stages are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixingFlags {
    pub local: bool,
    pub global: bool,
}

impl Default for MixingFlags {
    fn default() -> Self {
        Self {
            local: true,
            global: true,
        }
    }
}

/// Random streams consumed by a step: mask placement, `λ₁`, `λ₂` and the
/// mixing-point choice each have their own.
#[derive(Clone, Debug)]
pub struct StepStreams {
    pub mask: RandomStream,
    pub lambda1: RandomStream,
    pub lambda2: RandomStream,
    pub layer: RandomStream,
}

impl StepStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            mask: RandomStream::new(seed, "mask"),
            lambda1: RandomStream::new(seed, "lambda1"),
            lambda2: RandomStream::new(seed, "lambda2"),
            layer: RandomStream::new(seed, "layer"),
        }
    }

    pub fn states(&self) -> Vec<StreamState> {
        [&self.mask, &self.lambda1, &self.lambda2, &self.layer]
            .iter()
            .map(|s| s.state())
            .collect()
    }

    pub fn restore(states: &[StreamState]) -> Result<Self> {
        let find = |id: &str| {
            states
                .iter()
                .find(|s| s.stream_id == id)
                .ok_or_else(|| Error::Checkpoint(format!("missing stream {id}")))
                .and_then(RandomStream::restore)
        };
        Ok(Self {
            mask: find("mask")?,
            lambda1: find("lambda1")?,
            lambda2: find("lambda2")?,
            layer: find("layer")?,
        })
    }
}

/// The random choices of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    /// One mask (carrying its `λ₁`) per quadruple.
    pub masks: Vec<MixMask>,
    /// Shared by every network's mixed forward.
    pub lambda2: f64,
    /// One mixing point per network.
    pub mix_points: Vec<usize>,
}

/// Averaged peer-teacher outputs, already shaped for one student.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherView {
    pub mixed_logits: Tensor,
    pub mixed_feature: Tensor,
    /// Plain-forward logits on `m1` rows then `m2` rows.
    pub endpoint_logits: Tensor,
    pub lambda2: f64,
}

/// The loss nodes of one student on its tape.
#[derive(Clone, Debug)]
pub struct StudentTerms {
    pub cls: Var,
    pub m_logit: Var,
    pub fea: Var,
    pub e_logit: Var,
    pub total: Var,
    /// Confidence weights of the endpoint rows (`m1` rows, then `m2` rows).
    pub weights: Vec<f64>,
}

impl StudentTerms {
    pub fn breakdown(&self, g: &Graph, warmup: f64) -> LossBreakdown {
        LossBreakdown {
            cls: g.value(self.cls).item(),
            m_logit: g.value(self.m_logit).item(),
            fea: g.value(self.fea).item(),
            e_logit: g.value(self.e_logit).item(),
            warmup,
            total: g.value(self.total).item(),
        }
    }
}

/// Network inputs for one batch of quadruples.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// `6Q` images: `c1, c2, d1, d2, m1, m2` blocks of `Q` rows each.
    pub plain: Tensor,
    pub m1: Tensor,
    pub m2: Tensor,
    /// Soft targets aligned with `plain`.
    pub targets: Tensor,
    pub quadruples: usize,
}

impl PreparedBatch {
    pub fn new(batch: &[Quadruple], masks: &[MixMask], num_classes: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Protocol("empty batch".into()));
        }
        if masks.len() != batch.len() {
            return Err(Error::Protocol(format!("{} masks for {} quadruples", masks.len(), batch.len())));
        }
        let q = batch.len();
        let pairs = batch
            .iter()
            .zip(masks)
            .map(|(quad, mask)| mixing::local_mix(quad, mask, num_classes))
            .collect::<Result<Vec<_>>>()?;
        let onehot = |c: usize| {
            let mut v = vec![0.0; num_classes];
            v[c] = 1.0;
            v
        };
        let mut images: Vec<&Tensor> = Vec::with_capacity(6 * q);
        images.extend(batch.iter().map(|b| &b.c1));
        images.extend(batch.iter().map(|b| &b.c2));
        images.extend(batch.iter().map(|b| &b.d1));
        images.extend(batch.iter().map(|b| &b.d2));
        images.extend(pairs.iter().map(|p| &p.m1));
        images.extend(pairs.iter().map(|p| &p.m2));
        let plain = Tensor::stack(&images)?;
        let m1 = Tensor::stack(&pairs.iter().map(|p| &p.m1).collect::<Vec<_>>())?;
        let m2 = Tensor::stack(&pairs.iter().map(|p| &p.m2).collect::<Vec<_>>())?;

        let mut targets = Vec::with_capacity(6 * q * num_classes);
        for block in 0..6 {
            for (quad, pair) in batch.iter().zip(&pairs) {
                match block {
                    0 | 1 => targets.extend(onehot(quad.class_c)),
                    2 | 3 => targets.extend(onehot(quad.class_d)),
                    _ => targets.extend_from_slice(&pair.soft_label),
                }
            }
        }
        Ok(Self {
            plain,
            m1,
            m2,
            targets: Tensor::new(vec![6 * q, num_classes], targets)?,
            quadruples: q,
        })
    }

    /// Rows of the `m1` and `m2` blocks.
    pub fn endpoint_rows(&self) -> Vec<usize> {
        (4 * self.quadruples..6 * self.quadruples).collect()
    }
}

/// Arithmetic mean of the peer-teachers' logits.
pub fn ensemble_teacher_logits(records: &[&ForwardRecord]) -> Result<Tensor> {
    mean_of(records.iter().map(|r| &r.logits))
}

/// Teacher features resized to `target_shape` (per sample) and averaged.
pub fn ensemble_teacher_features(features: &[&Tensor], target_shape: &[usize]) -> Result<Tensor> {
    let resized = features
        .iter()
        .map(|f| losses::resize_feature(f, target_shape))
        .collect::<Result<Vec<_>>>()?;
    mean_of(resized.iter())
}

fn mean_of<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut count = 0usize;
    let mut acc: Option<Tensor> = None;
    for t in items {
        count += 1;
        match &mut acc {
            None => acc = Some(t.clone()),
            Some(a) => {
                t.ensure_shape(a.shape())?;
                a.add_assign(t);
            }
        }
    }
    let acc = acc.ok_or_else(|| Error::Protocol("cannot ensemble an empty teacher list".into()))?;
    Ok(acc.scale(1.0 / count as f64))
}

/// Plain and mixed forward outputs of one network.
#[derive(Clone, Debug)]
pub struct PeerOutputs {
    pub plain: ForwardRecord,
    pub mixed: ForwardRecord,
}

/// Build the peer-teacher seen by a student with final feature shape
/// `feature_shape`.
pub fn teacher_view(peers: &[&PeerOutputs], feature_shape: &[usize], endpoint_rows: &[usize]) -> Result<TeacherView> {
    let lambda2 = peers
        .first()
        .and_then(|p| p.mixed.lambda2)
        .ok_or_else(|| Error::Protocol("peer-teacher list is empty or not mixed".into()))?;
    if peers.iter().any(|p| p.mixed.lambda2 != Some(lambda2)) {
        return Err(Error::Protocol("peer-teachers disagree on λ₂".into()));
    }
    let mixed: Vec<&ForwardRecord> = peers.iter().map(|p| &p.mixed).collect();
    let feats: Vec<&Tensor> = peers.iter().map(|p| &p.mixed.feature).collect();
    let endpoints: Vec<Tensor> = peers.iter().map(|p| p.plain.logits.gather_rows(endpoint_rows)).collect();
    Ok(TeacherView {
        mixed_logits: ensemble_teacher_logits(&mixed)?,
        mixed_feature: ensemble_teacher_features(&feats, feature_shape)?,
        endpoint_logits: mean_of(endpoints.iter())?,
        lambda2,
    })
}

/// Put the four terms and their warmed-up total for one student on its tape.
///
/// `fixed_weights`, when given, replaces the confidence weights computed from
/// the endpoint cross-entropies.
#[allow(clippy::too_many_arguments)]
pub fn assemble_student_loss(
    g: &mut Graph,
    plain: &TapeRecord,
    mixed: &TapeRecord,
    teacher: &TeacherView,
    batch: &PreparedBatch,
    hp: &KdHyperparams,
    warmup: f64,
    fixed_weights: Option<&[f64]>,
) -> Result<StudentTerms> {
    if mixed.lambda2 != Some(teacher.lambda2) {
        return Err(Error::Protocol(format!(
            "student mixed with λ₂ = {:?}, teacher with {}",
            mixed.lambda2, teacher.lambda2
        )));
    }
    let q = batch.quadruples;
    let per_quad = 1.0 / q as f64;
    let t = hp.temperature;

    let cls = g.soft_cross_entropy(plain.logits, &batch.targets, &vec![per_quad; 6 * q])?;
    let m_logit = g.tempered_kl(mixed.logits, &teacher.mixed_logits, t, &vec![per_quad; q])?;
    let fea = g.feature_distance(mixed.feature, &teacher.mixed_feature, &vec![per_quad; q])?;

    let rows = batch.endpoint_rows();
    let targets = batch.targets.gather_rows(&rows);
    let weights = match fixed_weights {
        Some(w) if w.len() == 2 * q => w.to_vec(),
        Some(w) => return Err(Error::shape(&[2 * q], &[w.len()])),
        None => {
            let student = g.value(plain.logits).gather_rows(&rows);
            (0..2 * q)
                .map(|r| {
                    let ls = losses::soft_cross_entropy(student.row(r), targets.row(r))?;
                    let lt = losses::soft_cross_entropy(teacher.endpoint_logits.row(r), targets.row(r))?;
                    Ok(losses::confidence_weight(ls, lt))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let endpoint = g.gather_rows(plain.logits, rows)?;
    let scaled: Vec<f64> = weights.iter().map(|w| w * per_quad).collect();
    let e_logit = g.tempered_kl(endpoint, &teacher.endpoint_logits, t, &scaled)?;

    let total = g.weighted_sum(&[
        (cls, 1.0),
        (m_logit, warmup * hp.beta),
        (fea, warmup * hp.gamma),
        (e_logit, warmup * hp.delta),
    ])?;
    Ok(StudentTerms {
        cls,
        m_logit,
        fea,
        e_logit,
        total,
        weights,
    })
}

/// A network's tape for one step.
pub struct NetworkTape {
    pub graph: Graph,
    pub binding: Binding,
    pub plain: TapeRecord,
    pub mixed: TapeRecord,
}

impl NetworkTape {
    pub fn run(net: &Network, batch: &PreparedBatch, k: usize, lambda2: f64, mode: Mode) -> Result<Self> {
        let mut graph = Graph::new();
        let mut binding = net.bind(&mut graph, mode, true);
        let x = graph.constant(batch.plain.clone());
        let plain = net.forward(&mut graph, &mut binding, x)?;
        let m1 = graph.constant(batch.m1.clone());
        let m2 = graph.constant(batch.m2.clone());
        let mixed = net.forward_mixed(&mut graph, &mut binding, m1, m2, k, lambda2)?;
        Ok(Self {
            graph,
            binding,
            plain,
            mixed,
        })
    }

    pub fn outputs(&self) -> PeerOutputs {
        PeerOutputs {
            plain: self.plain.values(&self.graph),
            mixed: self.mixed.values(&self.graph),
        }
    }
}

/// Losses and parameter gradients of every network for one step.
pub struct StepOutcome {
    pub breakdowns: Vec<LossBreakdown>,
    pub grads: Vec<Vec<Tensor>>,
    pub bindings: Vec<Binding>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub networks: Vec<Network>,
    pub optimizers: Vec<Sgd>,
    pub hp: KdHyperparams,
    pub alpha1: f64,
    pub alpha2: f64,
    pub flags: MixingFlags,
}

impl Cohort {
    pub fn new(networks: Vec<Network>, optimizer: Sgd, hp: KdHyperparams, alpha1: f64, alpha2: f64, flags: MixingFlags) -> Result<Self> {
        if networks.len() < 2 {
            return Err(Error::Config(format!("a cohort needs ≥2 networks, got {}", networks.len())));
        }
        let classes = networks[0].num_classes();
        let input = networks[0].input_shape();
        for net in &networks[1..] {
            if net.num_classes() != classes {
                return Err(Error::Config(format!(
                    "networks disagree on class count ({classes} vs {})",
                    net.num_classes()
                )));
            }
            if net.input_shape() != input {
                return Err(Error::Config(format!(
                    "networks disagree on input shape ({input:?} vs {:?})",
                    net.input_shape()
                )));
            }
        }
        hp.validate()?;
        for (name, a) in [("alpha1", alpha1), ("alpha2", alpha2)] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidHyperparameter {
                    name,
                    value: a,
                    reason: "Beta concentration must be positive",
                });
            }
        }
        let optimizers = vec![optimizer; networks.len()];
        Ok(Self {
            networks,
            optimizers,
            hp,
            alpha1,
            alpha2,
            flags,
        })
    }

    pub fn len(&self) -> usize {
        self.networks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.networks[0].num_classes()
    }

    pub fn set_lr(&mut self, lr: f64) {
        for opt in &mut self.optimizers {
            opt.lr = lr;
        }
    }

    /// Masks, `λ₂` and mixing points for `batch`. Disabled stages consume no
    /// randomness: local off fixes `λ₁ = 1`, global off fixes `λ₂ = 1` and
    /// `k = 0`.
    pub fn draw(&self, batch: &[Quadruple], streams: &mut StepStreams) -> Result<StepDraws> {
        let masks = batch
            .iter()
            .map(|quad| {
                let (h, w) = match quad.image_shape() {
                    &[_, h, w] => (h, w),
                    other => return Err(Error::shape(&[0, 0, 0], other)),
                };
                if self.flags.local {
                    let lambda1 = sample_beta(&mut streams.lambda1, self.alpha1)?;
                    mixing::make_mask(&mut streams.mask, lambda1, h, w)
                } else {
                    Ok(MixMask::full(h, w))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (lambda2, mix_points) = if self.flags.global {
            let lambda2 = sample_beta(&mut streams.lambda2, self.alpha2)?;
            let points = self
                .networks
                .iter()
                .map(|net| {
                    let reg = net.mixing_points().indices();
                    reg[streams.layer.below(reg.len())]
                })
                .collect();
            (lambda2, points)
        } else {
            (1.0, vec![0; self.networks.len()])
        };
        Ok(StepDraws {
            masks,
            lambda2,
            mix_points,
        })
    }

    /// Every student's losses and gradients against the current parameters.
    /// Nothing is updated.
    pub fn compute_step(&self, batch: &[Quadruple], draws: &StepDraws, epoch: usize) -> Result<StepOutcome> {
        self.compute_step_in(batch, draws, epoch, Mode::Train)
    }

    pub fn compute_step_in(&self, batch: &[Quadruple], draws: &StepDraws, epoch: usize, mode: Mode) -> Result<StepOutcome> {
        if draws.mix_points.len() != self.networks.len() {
            return Err(Error::Protocol(format!(
                "{} mixing points for {} networks",
                draws.mix_points.len(),
                self.networks.len()
            )));
        }
        let prepared = PreparedBatch::new(batch, &draws.masks, self.num_classes())?;
        let mut tapes = self
            .networks
            .iter()
            .zip(&draws.mix_points)
            .map(|(net, &k)| NetworkTape::run(net, &prepared, k, draws.lambda2, mode))
            .collect::<Result<Vec<_>>>()?;
        let outputs: Vec<PeerOutputs> = tapes.iter().map(NetworkTape::outputs).collect();
        let warmup = losses::warmup_factor(epoch, self.hp.warmup_epochs);
        let rows = prepared.endpoint_rows();

        let mut breakdowns = Vec::with_capacity(tapes.len());
        let mut grads = Vec::with_capacity(tapes.len());
        for (i, tape) in tapes.iter_mut().enumerate() {
            let peers: Vec<&PeerOutputs> = outputs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| o).collect();
            let view = teacher_view(&peers, self.networks[i].feature_shape(), &rows)?;
            let terms = assemble_student_loss(
                &mut tape.graph,
                &tape.plain,
                &tape.mixed,
                &view,
                &prepared,
                &self.hp,
                warmup,
                None,
            )?;
            breakdowns.push(terms.breakdown(&tape.graph, warmup));
            let mut g = tape.graph.backward(terms.total)?;
            let net_grads = tape
                .binding
                .params()
                .iter()
                .zip(self.networks[i].params())
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            grads.push(net_grads);
        }
        Ok(StepOutcome {
            breakdowns,
            grads,
            bindings: tapes.into_iter().map(|t| t.binding).collect(),
        })
    }

    /// Apply one optimizer update per network and fold in the observed batch
    /// statistics.
    pub fn apply(&mut self, outcome: StepOutcome) -> Result<Vec<LossBreakdown>> {
        for (i, (grads, binding)) in outcome.grads.iter().zip(&outcome.bindings).enumerate() {
            self.networks[i].absorb_statistics(binding);
            self.optimizers[i].step(self.networks[i].params_mut(), grads)?;
        }
        Ok(outcome.breakdowns)
    }

    pub fn train_step(&mut self, batch: &[Quadruple], streams: &mut StepStreams, epoch: usize) -> Result<Vec<LossBreakdown>> {
        let draws = self.draw(batch, streams)?;
        let outcome = self.compute_step(batch, &draws, epoch)?;
        self.apply(outcome)
    }
}

/// Loss parts as plain numbers, for callers that do not need gradients.
pub fn parts_of(b: &LossBreakdown) -> LossParts {
    LossParts {
        cls: b.cls,
        m_logit: b.m_logit,
        fea: b.fea,
        e_logit: b.e_logit,
    }
}
