//! Straightforward scalar re-implementations used as oracles.
//!
//! Nothing here calls into the library's tensor, graph or loss code; images
//! are flat `c·h·w` vectors and every operation is an explicit loop.

#![allow(dead_code)]

use metamixer::{MixMask, Network};

/// Weights of a `toy-h?-f?` network, read from its parameter list.
#[derive(Clone, Debug)]
pub struct Toy {
    pub cin: usize,
    pub hidden: usize,
    pub features: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

impl Toy {
    pub fn of(net: &Network) -> Self {
        let p = net.params();
        assert_eq!(net.param_names()[0], "layer1.weight");
        let hidden = p[0].shape()[0];
        Toy {
            cin: p[0].shape()[1],
            hidden,
            features: p[2].shape()[0],
            classes: p[4].shape()[0],
            w1: p[0].data().to_vec(),
            b1: p[1].data().to_vec(),
            w2: p[2].data().to_vec(),
            b2: p[3].data().to_vec(),
            fc_w: p[4].data().to_vec(),
            fc_b: p[5].data().to_vec(),
        }
    }

    /// First stage: 3×3 conv (zero padding 1) + ReLU.
    pub fn stage1(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        relu(conv3x3(x, self.cin, h, w, &self.w1, &self.b1, self.hidden))
    }

    pub fn stage2(&self, a: &[f64], h: usize, w: usize) -> Vec<f64> {
        relu(conv3x3(a, self.hidden, h, w, &self.w2, &self.b2, self.features))
    }

    /// Logits from the final feature map.
    pub fn head(&self, feature: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        let pooled: Vec<f64> = (0..self.features)
            .map(|c| feature[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        (0..self.classes)
            .map(|k| self.fc_b[k] + (0..self.features).map(|c| self.fc_w[k * self.features + c] * pooled[c]).sum::<f64>())
            .collect()
    }

    /// `(logits, feature)` of an unmixed pass.
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let f = self.stage2(&self.stage1(x, h, w), h, w);
        (self.head(&f, h, w), f)
    }

    /// Mixed pass with interpolation at point `k` (0 = pixels, 1 = after
    /// the first stage).
    pub fn forward_mixed(&self, m1: &[f64], m2: &[f64], k: usize, lambda2: f64, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let lerp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| lambda2 * x + (1.0 - lambda2) * y).collect::<Vec<_>>();
        let f = match k {
            0 => self.stage2(&self.stage1(&lerp(m1, m2), h, w), h, w),
            1 => self.stage2(&lerp(&self.stage1(m1, h, w), &self.stage1(m2, h, w)), h, w),
            _ => panic!("toy nets mix at 0 or 1"),
        };
        (self.head(&f, h, w), f)
    }
}

pub fn conv3x3(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o];
                for c in 0..cin {
                    for i in 0..3 {
                        for j in 0..3 {
                            let (sy, sx) = (y as isize + i as isize - 1, xx as isize + j as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += weight[((o * cin + c) * 3 + i) * 3 + j] * x[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn softmax_t(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    let p = softmax_t(logits, 1.0);
    -target.iter().zip(&p).map(|(t, q)| if *t == 0.0 { 0.0 } else { t * q.ln() }).sum::<f64>()
}

/// `T² · Σ p_t (ln p_t − ln p_s)` at temperature `t`.
pub fn kl_t(student: &[f64], teacher: &[f64], t: f64) -> f64 {
    let ps = softmax_t(student, t);
    let pt = softmax_t(teacher, t);
    t * t * pt.iter().zip(&ps).map(|(a, b)| if *a == 0.0 { 0.0 } else { a * (a.ln() - b.ln()) }).sum::<f64>()
}

pub fn l2_over_count(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / a.len() as f64
}

pub fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter().map(|o| o / vs.len() as f64).collect()
}

pub fn paste(mask: &MixMask, inside: &[f64], outside: &[f64], c: usize) -> Vec<f64> {
    let (h, w) = (mask.image_h, mask.image_w);
    let mut out = outside.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if y >= mask.top && y < mask.top + mask.mask_h && x >= mask.left && x < mask.left + mask.mask_w {
                    out[(ch * h + y) * w + x] = inside[(ch * h + y) * w + x];
                }
            }
        }
    }
    out
}

/// One quadruple's images plus the mixing it was given.
pub struct OracleQuad {
    pub c: [Vec<f64>; 2],
    pub d: [Vec<f64>; 2],
    pub class_c: usize,
    pub class_d: usize,
    pub mask: MixMask,
}

#[derive(Clone, Copy, Debug)]
pub struct OracleHp {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub t: f64,
    pub warmup: f64,
}

/// `(cls, m_logit, fea, e_logit, total)` of network `s` against the mean of
/// the others, averaged over quadruples. Networks must share feature shapes.
pub fn oracle_loss(
    nets: &[Toy],
    s: usize,
    quads: &[OracleQuad],
    ks: &[usize],
    lambda2: f64,
    hp: OracleHp,
    (ch, h, w): (usize, usize, usize),
) -> [f64; 5] {
    let classes = nets[0].classes;
    let onehot = |c: usize| (0..classes).map(|i| if i == c { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let teachers: Vec<usize> = (0..nets.len()).filter(|&i| i != s).collect();
    let mut sums = [0.0; 4];
    for q in quads {
        let lambda1 = q.mask.lambda1;
        let y: Vec<f64> = (0..classes)
            .map(|i| {
                let mut v = 0.0;
                if i == q.class_c {
                    v += lambda1;
                }
                if i == q.class_d {
                    v += 1.0 - lambda1;
                }
                v
            })
            .collect();
        let m = [paste(&q.mask, &q.c[0], &q.d[0], ch), paste(&q.mask, &q.c[1], &q.d[1], ch)];
        let student = &nets[s];

        let mut cls = 0.0;
        for ((c, d), mixed) in q.c.iter().zip(&q.d).zip(&m) {
            cls += cross_entropy(&student.forward(c, h, w).0, &onehot(q.class_c));
            cls += cross_entropy(&student.forward(d, h, w).0, &onehot(q.class_d));
            cls += cross_entropy(&student.forward(mixed, h, w).0, &y);
        }

        let (s_mixed, s_feat) = student.forward_mixed(&m[0], &m[1], ks[s], lambda2, h, w);
        let t_mixed: Vec<(Vec<f64>, Vec<f64>)> = teachers
            .iter()
            .map(|&t| nets[t].forward_mixed(&m[0], &m[1], ks[t], lambda2, h, w))
            .collect();
        let t_logits = mean_of(&t_mixed.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
        let t_feat = mean_of(&t_mixed.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
        let m_logit = kl_t(&s_mixed, &t_logits, hp.t);
        let fea = l2_over_count(&s_feat, &t_feat);

        let mut e_logit = 0.0;
        for mi in &m {
            let zs = student.forward(mi, h, w).0;
            let zt = mean_of(&teachers.iter().map(|&t| nets[t].forward(mi, h, w).0).collect::<Vec<_>>());
            let (ls, lt) = (cross_entropy(&zs, &y), cross_entropy(&zt, &y));
            let weight = if ls + lt == 0.0 { 0.5 } else { lt / (ls + lt) };
            e_logit += weight * kl_t(&zs, &zt, hp.t);
        }
        for (acc, v) in sums.iter_mut().zip([cls, m_logit, fea, e_logit]) {
            *acc += v;
        }
    }
    let n = quads.len() as f64;
    let [cls, m, f, e] = sums.map(|v| v / n);
    let total = cls + hp.warmup * (hp.beta * m + hp.gamma * f + hp.delta * e);
    [cls, m, f, e, total]
}

pub mod fixtures {
    use super::{oracle_loss, OracleHp, OracleQuad, Toy};
    use metamixer::cohort::{Cohort, MixingFlags, StepDraws, StepStreams};
    use metamixer::{Architecture, KdHyperparams, Mode, Network, Quadruple, RandomStream, Sgd, Tensor};

    pub const SHAPE: [usize; 3] = [3, 6, 6];

    pub fn network(arch: &str, classes: usize, seed: u64) -> Network {
        let arch: Architecture = arch.parse().unwrap();
        Network::new(arch, SHAPE, classes, &mut RandomStream::new(seed, "init")).unwrap()
    }

    pub fn quadruples(count: usize, classes: usize, seed: u64) -> Vec<Quadruple> {
        let mut rng = RandomStream::new(seed, "images");
        (0..count)
            .map(|i| {
                let mut img = || Tensor::from_fn(&SHAPE, |_| 2.0 * rng.uniform() - 1.0);
                let (c, d) = (i % classes, (i + 1) % classes);
                Quadruple::new([img(), img()], [img(), img()], c, d).unwrap()
            })
            .collect()
    }

    pub fn cohort(nets: Vec<Network>, flags: MixingFlags) -> Cohort {
        Cohort::new(nets, Sgd::new(0.05, 0.9, 5e-4), KdHyperparams::default(), 1.0, 0.2, flags).unwrap()
    }

    /// Largest gap between the cohort's loss terms and the scalar oracle, over
    /// every network and term.
    pub fn oracle_gap(archs: &[&str], seed: u64, epoch: usize) -> f64 {
        let classes = 4;
        let nets: Vec<Network> = archs.iter().enumerate().map(|(i, a)| network(a, classes, seed * 10 + i as u64)).collect();
        let cohort = cohort(nets, MixingFlags::default());
        let batch = quadruples(2, classes, seed);
        let mut streams = StepStreams::new(seed);
        let mut draws: StepDraws = cohort.draw(&batch, &mut streams).unwrap();
        draws.mix_points = (0..archs.len()).map(|i| i % 2).collect();
        let outcome = cohort.compute_step_in(&batch, &draws, epoch, Mode::Train).unwrap();

        let toys: Vec<Toy> = cohort.networks.iter().map(Toy::of).collect();
        let quads: Vec<OracleQuad> = batch
            .iter()
            .zip(&draws.masks)
            .map(|(q, m)| OracleQuad {
                c: [q.c1.data().to_vec(), q.c2.data().to_vec()],
                d: [q.d1.data().to_vec(), q.d2.data().to_vec()],
                class_c: q.class_c,
                class_d: q.class_d,
                mask: *m,
            })
            .collect();
        let hp = cohort.hp;
        let ohp = OracleHp {
            beta: hp.beta,
            gamma: hp.gamma,
            delta: hp.delta,
            t: hp.temperature,
            warmup: (epoch as f64 / hp.warmup_epochs as f64).min(1.0),
        };
        let mut gap: f64 = 0.0;
        for (s, b) in outcome.breakdowns.iter().enumerate() {
            let o = oracle_loss(&toys, s, &quads, &draws.mix_points, draws.lambda2, ohp, (SHAPE[0], SHAPE[1], SHAPE[2]));
            for (a, e) in [b.cls, b.m_logit, b.fea, b.e_logit, b.total].iter().zip(o) {
                gap = gap.max((a - e).abs());
            }
        }
        gap
    }
}

/// A desk-profile run small enough for unit-test budgets.
pub fn tiny_config(out: &std::path::Path, epochs: usize) -> metamixer::ExperimentConfig {
    let text = format!(
        r#"
        out_dir = "{}"
        synthetic_classes = 4
        synthetic_side = 8
        synthetic_train_size = 96
        synthetic_test_size = 40
        architectures = ["tiny-resnet-w4-b1", "toy-h3-f4"]
        batch_size = 16
        epochs = {epochs}
        decay_epochs = []
        warmup_epochs = 2
        checkpoint_every = 2
        "#,
        out.display()
    );
    metamixer::ExperimentConfig::from_toml_with(&text, "desk").unwrap()
}
