//! Networks with staged forward passes.
//!
//! A network is a chain of segments followed by global average pooling and a
//! linear classifier. Mixing point `k` is the input of segment `k`; point 0 is
//! the raw image. The output of the last segment is the final feature map,
//! which can be reached with [`Network::forward_to`] but is not a registered
//! mixing point.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvGeometry, Graph, Var};
use crate::sampling::RandomStream;
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// Three residual stages of widths `w, 2w, 4w` with `blocks` basic
    /// blocks each.
    TinyResNet { width: usize, blocks: usize },
    /// Stem conv, then two blocks (two convs, then one conv).
    PlainConv { width: usize },
    /// Two biased 3×3 convs with ReLU, no normalization.
    Toy { hidden: usize, features: usize },
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::TinyResNet { width, blocks } => write!(f, "tiny-resnet-w{width}-b{blocks}"),
            Architecture::PlainConv { width } => write!(f, "plain-conv-w{width}"),
            Architecture::Toy { hidden, features } => write!(f, "toy-h{hidden}-f{features}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown architecture {s:?}"));
        let num = |p: &str, prefix: char| -> Result<usize> {
            p.strip_prefix(prefix).and_then(|v| v.parse().ok()).filter(|&v| v > 0).ok_or_else(bad)
        };
        if s == "toy" {
            return Ok(Architecture::Toy { hidden: 2, features: 3 });
        }
        let parts: Vec<&str> = s.split('-').collect();
        match parts.as_slice() {
            ["tiny", "resnet", w] => Ok(Architecture::TinyResNet {
                width: num(w, 'w')?,
                blocks: 1,
            }),
            ["tiny", "resnet", w, b] => Ok(Architecture::TinyResNet {
                width: num(w, 'w')?,
                blocks: num(b, 'b')?,
            }),
            ["plain", "conv", w] => Ok(Architecture::PlainConv { width: num(w, 'w')? }),
            ["toy", h, f] => Ok(Architecture::Toy {
                hidden: num(h, 'h')?,
                features: num(f, 'f')?,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixingPoint {
    pub k: usize,
    pub name: String,
}

/// Ordered eligible global-mixing points; index 0 is the raw input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixingPointRegistry {
    pub points: Vec<MixingPoint>,
}

impl MixingPointRegistry {
    pub fn indices(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.k).collect()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.points.iter().any(|p| p.k == k)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub parameter_count: usize,
    pub feature_shape: Vec<usize>,
}

/// Forward outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    /// `n × num_classes`
    pub logits: Tensor,
    /// `n × C × H' × W'`, pre-pooling output of the last stage.
    pub feature: Tensor,
    pub mix_point: Option<usize>,
    pub lambda2: Option<f64>,
}

/// Forward outputs as nodes on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapeRecord {
    pub logits: Var,
    pub feature: Var,
    pub mix_point: Option<usize>,
    pub lambda2: Option<f64>,
}

impl TapeRecord {
    pub fn values(&self, g: &Graph) -> ForwardRecord {
        ForwardRecord {
            logits: g.value(self.logits).clone(),
            feature: g.value(self.feature).clone(),
            mix_point: self.mix_point,
            lambda2: self.lambda2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are observed for later update.
    Train,
    /// Frozen running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv {
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    Norm {
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    Relu,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
}

/// A network's parameters as they sit on one tape, plus the batch statistics
/// observed while running in training mode.
#[derive(Debug)]
pub struct Binding {
    params: Vec<Var>,
    mode: Mode,
    observed: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
}

impl Binding {
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    input_shape: [usize; 3],
    num_classes: usize,
    param_names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    segments: Vec<(String, Vec<Layer>)>,
    fc_w: usize,
    fc_b: usize,
    /// Per-sample shape at every point, terminal feature included.
    point_shapes: Vec<Vec<usize>>,
}

struct Builder<'a> {
    rng: &'a mut RandomStream,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// He-normal 3×3 (or 1×1) conv.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Layer {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(self.rng));
        let w = self.param(format!("{name}.weight"), w);
        let b = bias.then(|| {
            let bound = 1.0 / fan_in.sqrt();
            let u = Uniform::new_inclusive(-bound, bound);
            let b = Tensor::from_fn(&[cout], |_| u.sample(self.rng));
            self.param(format!("{name}.bias"), b)
        });
        Layer::Conv {
            w,
            b,
            geom: ConvGeometry { stride, pad: k / 2 },
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Layer {
        let gamma = self.param(format!("{name}.weight"), Tensor::full(&[c], 1.0));
        let beta = self.param(format!("{name}.bias"), Tensor::zeros(&[c]));
        self.stat_names.push(name.to_owned());
        self.stats.push(RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        Layer::Norm {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn basic_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Vec<Layer> {
        let body = vec![
            self.conv(&format!("{name}.conv1"), cin, cout, 3, stride, false),
            self.norm(&format!("{name}.bn1"), cout),
            Layer::Relu,
            self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false),
            self.norm(&format!("{name}.bn2"), cout),
        ];
        let shortcut = if stride != 1 || cin != cout {
            vec![
                self.conv(&format!("{name}.shortcut.conv"), cin, cout, 1, stride, false),
                self.norm(&format!("{name}.shortcut.bn"), cout),
            ]
        } else {
            Vec::new()
        };
        vec![Layer::Residual { body, shortcut }, Layer::Relu]
    }

    fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Vec<Layer> {
        vec![
            self.conv(&format!("{name}.conv"), cin, cout, 3, stride, false),
            self.norm(&format!("{name}.bn"), cout),
            Layer::Relu,
        ]
    }
}

impl Network {
    pub fn new(arch: Architecture, input_shape: [usize; 3], num_classes: usize, rng: &mut RandomStream) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("a classifier needs ≥2 classes, got {num_classes}")));
        }
        if input_shape.contains(&0) {
            return Err(Error::Config(format!("empty input shape {input_shape:?}")));
        }
        let cin = input_shape[0];
        let mut b = Builder {
            rng,
            names: Vec::new(),
            params: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
        };
        let (segments, feat_c) = match arch {
            Architecture::TinyResNet { width, blocks } => {
                let mut segments = vec![("stem".to_owned(), b.conv_bn_relu("stem", cin, width, 1))];
                let mut c = width;
                for (s, mult) in [1usize, 2, 4].into_iter().enumerate() {
                    let cout = width * mult;
                    let mut layers = Vec::new();
                    for blk in 0..blocks {
                        let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                        layers.extend(b.basic_block(&format!("stage{}.{blk}", s + 1), c, cout, stride));
                        c = cout;
                    }
                    segments.push((format!("stage{}", s + 1), layers));
                }
                (segments, c)
            }
            Architecture::PlainConv { width } => {
                let stem = b.conv_bn_relu("stem", cin, width, 1);
                let mut block1 = b.conv_bn_relu("block1.0", width, 2 * width, 2);
                block1.extend(b.conv_bn_relu("block1.1", 2 * width, 2 * width, 1));
                let block2 = b.conv_bn_relu("block2.0", 2 * width, 4 * width, 2);
                (
                    vec![
                        ("stem".to_owned(), stem),
                        ("block1".to_owned(), block1),
                        ("block2".to_owned(), block2),
                    ],
                    4 * width,
                )
            }
            Architecture::Toy { hidden, features } => {
                let l1 = vec![b.conv("layer1", cin, hidden, 3, 1, true), Layer::Relu];
                let l2 = vec![b.conv("layer2", hidden, features, 3, 1, true), Layer::Relu];
                (vec![("layer1".to_owned(), l1), ("layer2".to_owned(), l2)], features)
            }
        };
        let bound = 1.0 / (feat_c as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound);
        let fc_w = Tensor::from_fn(&[num_classes, feat_c], |_| u.sample(b.rng));
        let fc_b = Tensor::from_fn(&[num_classes], |_| u.sample(b.rng));
        let fc_w = b.param("fc.weight".into(), fc_w);
        let fc_b = b.param("fc.bias".into(), fc_b);

        let mut net = Network {
            arch,
            input_shape,
            num_classes,
            param_names: b.names,
            params: b.params,
            stat_names: b.stat_names,
            stats: b.stats,
            segments,
            fc_w,
            fc_b,
            point_shapes: Vec::new(),
        };
        net.point_shapes = net.trace_shapes()?;
        Ok(net)
    }

    fn trace_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let mut bind = self.bind(&mut g, Mode::Eval, false);
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let mut h = g.constant(Tensor::zeros(&shape));
        let mut shapes = vec![self.input_shape.to_vec()];
        for (_, layers) in &self.segments {
            h = self.run_layers(&mut g, &mut bind, layers, h)?;
            shapes.push(g.value(h).shape()[1..].to_vec());
        }
        if shapes.last().is_some_and(|s| s.contains(&0)) {
            return Err(Error::Config(format!("input {:?} too small for {}", self.input_shape, self.arch)));
        }
        Ok(shapes)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Per-sample shape of the final feature map.
    pub fn feature_shape(&self) -> &[usize] {
        self.point_shapes.last().expect("traced")
    }

    /// Per-sample shape of the representation at point `k` (terminal
    /// included).
    pub fn representation_shape(&self, k: usize) -> Option<&[usize]> {
        self.point_shapes.get(k).map(Vec::as_slice)
    }

    pub fn terminal_point(&self) -> usize {
        self.segments.len()
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            architecture: self.arch,
            num_classes: self.num_classes,
            parameter_count: self.parameter_count(),
            feature_shape: self.feature_shape().to_vec(),
        }
    }

    pub fn mixing_points(&self) -> MixingPointRegistry {
        let mut points = vec![MixingPoint {
            k: 0,
            name: "input".into(),
        }];
        for (k, (name, _)) in self.segments.iter().enumerate().skip(1) {
            points.push(MixingPoint {
                k,
                name: format!("{name}.entry"),
            });
        }
        MixingPointRegistry { points }
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Put the parameters on `g`. With `trainable` the parameters are
    /// gradient leaves.
    pub fn bind(&self, g: &mut Graph, mode: Mode, trainable: bool) -> Binding {
        let params = self
            .params
            .iter()
            .map(|p| if trainable { g.parameter(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        Binding {
            params,
            mode,
            observed: Vec::new(),
        }
    }

    /// Fold the batch statistics observed under `binding` into the running
    /// statistics, in observation order.
    pub fn absorb_statistics(&mut self, binding: &Binding) {
        for (idx, mean, var, count) in &binding.observed {
            let stats = &mut self.stats[*idx];
            let unbias = if *count > 1 { *count as f64 / (*count - 1) as f64 } else { 1.0 };
            for (r, m) in stats.mean.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in stats.var.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    fn run_layers(&self, g: &mut Graph, bind: &mut Binding, layers: &[Layer], mut h: Var) -> Result<Var> {
        for layer in layers {
            h = match layer {
                Layer::Conv { w, b, geom } => g.conv2d(h, bind.params[*w], b.map(|b| bind.params[b]), *geom)?,
                Layer::Norm { gamma, beta, stats } => {
                    let (gm, bt) = (bind.params[*gamma], bind.params[*beta]);
                    match bind.mode {
                        Mode::Train => {
                            let (y, mean, var) = g.batch_norm_train(h, gm, bt)?;
                            let (n, _, hh, ww) = g.value(h).dims4()?;
                            bind.observed.push((*stats, mean, var, n * hh * ww));
                            y
                        }
                        Mode::Eval => {
                            let s = &self.stats[*stats];
                            g.batch_norm_eval(h, gm, bt, &s.mean, &s.var)?
                        }
                    }
                }
                Layer::Relu => g.relu(h),
                Layer::Residual { body, shortcut } => {
                    let main = self.run_layers(g, bind, body, h)?;
                    let skip = self.run_layers(g, bind, shortcut, h)?;
                    g.add(main, skip)?
                }
            };
        }
        Ok(h)
    }

    fn check_point(&self, k: usize, allow_terminal: bool) -> Result<()> {
        let registered = self.mixing_points().contains(k);
        if registered || (allow_terminal && k == self.terminal_point()) {
            Ok(())
        } else {
            Err(Error::Registry {
                k,
                available: self.mixing_points().indices(),
            })
        }
    }

    fn check_batch(&self, g: &Graph, x: Var, k: usize) -> Result<()> {
        let actual = g.value(x).shape();
        let expected = &self.point_shapes[k];
        if actual.len() != expected.len() + 1 || &actual[1..] != expected.as_slice() {
            let mut want = vec![actual.first().copied().unwrap_or(0)];
            want.extend_from_slice(expected);
            return Err(Error::shape(&want, actual));
        }
        Ok(())
    }

    /// Hidden representation at point `k` (`k = 0` returns `x` itself).
    pub fn forward_to(&self, g: &mut Graph, bind: &mut Binding, k: usize, x: Var) -> Result<Var> {
        self.check_point(k, true)?;
        self.check_batch(g, x, 0)?;
        let mut h = x;
        for (_, layers) in &self.segments[..k] {
            h = self.run_layers(g, bind, layers, h)?;
        }
        Ok(h)
    }

    /// Finish a pass from the representation `h` at point `k`.
    pub fn forward_from(&self, g: &mut Graph, bind: &mut Binding, k: usize, h: Var) -> Result<TapeRecord> {
        self.check_point(k, true)?;
        self.check_batch(g, h, k)?;
        let mut h = h;
        for (_, layers) in &self.segments[k..] {
            h = self.run_layers(g, bind, layers, h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = g.linear(pooled, bind.params[self.fc_w], bind.params[self.fc_b])?;
        Ok(TapeRecord {
            logits,
            feature: h,
            mix_point: None,
            lambda2: None,
        })
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, x: Var) -> Result<TapeRecord> {
        self.forward_from(g, bind, 0, x)
    }

    /// `forward_from(k, λ₂·forward_to(k, m1) + (1−λ₂)·forward_to(k, m2))`.
    pub fn forward_mixed(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        m1: Var,
        m2: Var,
        k: usize,
        lambda2: f64,
    ) -> Result<TapeRecord> {
        if !(0.0..=1.0).contains(&lambda2) {
            return Err(Error::InvalidCoefficient(lambda2));
        }
        self.check_point(k, false)?;
        if g.value(m1).shape() != g.value(m2).shape() {
            return Err(Error::shape(g.value(m1).shape(), g.value(m2).shape()));
        }
        let h1 = self.forward_to(g, bind, k, m1)?;
        let h2 = self.forward_to(g, bind, k, m2)?;
        let mixed = g.lerp(h1, h2, lambda2)?;
        let mut rec = self.forward_from(g, bind, k, mixed)?;
        rec.mix_point = Some(k);
        rec.lambda2 = Some(lambda2);
        Ok(rec)
    }

    /// Evaluation-mode forward without gradients.
    pub fn infer(&self, x: &Tensor) -> Result<ForwardRecord> {
        let mut g = Graph::new();
        let mut bind = self.bind(&mut g, Mode::Eval, false);
        let x = g.constant(x.clone());
        Ok(self.forward(&mut g, &mut bind, x)?.values(&g))
    }

    pub fn infer_to(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut bind = self.bind(&mut g, Mode::Eval, false);
        let x = g.constant(x.clone());
        let h = self.forward_to(&mut g, &mut bind, k, x)?;
        Ok(g.value(h).clone())
    }

    pub fn infer_from(&self, k: usize, h: &Tensor) -> Result<ForwardRecord> {
        let mut g = Graph::new();
        let mut bind = self.bind(&mut g, Mode::Eval, false);
        let h = g.constant(h.clone());
        Ok(self.forward_from(&mut g, &mut bind, k, h)?.values(&g))
    }

    pub fn infer_mixed(&self, m1: &Tensor, m2: &Tensor, k: usize, lambda2: f64) -> Result<ForwardRecord> {
        let mut g = Graph::new();
        let mut bind = self.bind(&mut g, Mode::Eval, false);
        let (m1, m2) = (g.constant(m1.clone()), g.constant(m2.clone()));
        Ok(self.forward_mixed(&mut g, &mut bind, m1, m2, k, lambda2)?.values(&g))
    }

    /// Replace parameters and running statistics by name; every name must be
    /// present with the stored shape.
    pub fn load_state(&mut self, params: &[(String, Tensor)], stats: &[(String, RunningStats)]) -> Result<()> {
        for (i, name) in self.param_names.iter().enumerate() {
            let (_, t) = params
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            t.ensure_shape(self.params[i].shape())?;
            self.params[i] = t.clone();
        }
        for (i, name) in self.stat_names.iter().enumerate() {
            let (_, s) = stats
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing statistics {name}")))?;
            if s.mean.len() != self.stats[i].mean.len() || s.var.len() != self.stats[i].var.len() {
                return Err(Error::Checkpoint(format!("statistics {name} have the wrong width")));
            }
            self.stats[i] = s.clone();
        }
        Ok(())
    }
}
