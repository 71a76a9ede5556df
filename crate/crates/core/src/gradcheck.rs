//! Central finite-difference checks of the four loss terms on a toy cohort.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{Architecture, Mode, Network};
use crate::cohort::{self, NetworkTape, PeerOutputs, PreparedBatch, StepDraws, StudentTerms, TeacherView};
use crate::data::SyntheticSpec;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::KdHyperparams;
use crate::mixing;
use crate::sampling::{sample_batch, sample_beta, RandomStream};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
/// Share of coordinates that must meet the relative tolerance.
pub const REL_SHARE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Cls,
    MLogit,
    Fea,
    ELogit,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Cls, Term::MLogit, Term::Fea, Term::ELogit];

    fn pick(self, t: &StudentTerms) -> Var {
        match self {
            Term::Cls => t.cls,
            Term::MLogit => t.m_logit,
            Term::Fea => t.fea,
            Term::ELogit => t.e_logit,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::Cls => "cls",
            Term::MLogit => "m_logit",
            Term::Fea => "fea",
            Term::ELogit => "e_logit",
        })
    }
}

/// Agreement between analytic and numeric gradients of one term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: Term,
    pub coordinates: usize,
    /// Coordinates with relative error ≤ [`REL_TOL`].
    pub within_rel: usize,
    /// Largest absolute error among the remaining coordinates.
    pub max_abs_outside: f64,
    pub max_rel: f64,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.coordinates > 0
            && self.within_rel as f64 >= REL_SHARE * self.coordinates as f64
            && self.max_abs_outside <= ABS_TOL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub student_parameters: usize,
    pub terms: Vec<TermCheck>,
    /// Largest gradient magnitude reaching any teacher parameter.
    pub teacher_grad_max: f64,
    /// Largest difference between the endpoint gradient with computed
    /// confidence weights and with the same weights fed in as constants.
    pub detachment_diff: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(TermCheck::passed) && self.teacher_grad_max == 0.0 && self.detachment_diff == 0.0
    }
}

/// A student, its peer-teacher and one fixed batch with fixed draws.
pub struct Setup {
    pub student: Network,
    pub teacher: Network,
    pub batch: PreparedBatch,
    pub draws: StepDraws,
    pub hp: KdHyperparams,
    view: TeacherView,
}

impl Setup {
    /// Toy student (275 parameters) against a wider toy teacher, so the
    /// feature term goes through a channel resize.
    pub fn toy(seed: u64) -> Result<Self> {
        let data = SyntheticSpec {
            num_classes: 3,
            side: 6,
            train_size: 30,
            test_size: 3,
            seed,
            max_shift: 1,
            ..SyntheticSpec::default()
        }
        .generate()?
        .train;
        let mut init = RandomStream::new(seed, "gradcheck/init");
        let student = Network::new(Architecture::Toy { hidden: 4, features: 4 }, [3, 6, 6], 3, &mut init)?;
        let teacher = Network::new(Architecture::Toy { hidden: 4, features: 6 }, [3, 6, 6], 3, &mut init)?;
        let mut rng = RandomStream::new(seed, "gradcheck/draws");
        let quads = sample_batch(&mut rng, &data, 8)?;
        let masks = quads
            .iter()
            .map(|_| {
                let l1 = sample_beta(&mut rng, 1.0)?;
                mixing::make_mask(&mut rng, l1, 6, 6)
            })
            .collect::<Result<Vec<_>>>()?;
        let draws = StepDraws {
            masks,
            lambda2: 0.3 + 0.4 * rng.uniform(),
            mix_points: vec![1, 0],
        };
        let batch = PreparedBatch::new(&quads, &draws.masks, 3)?;
        let t = NetworkTape::run(&teacher, &batch, draws.mix_points[1], draws.lambda2, Mode::Train)?;
        let peer = t.outputs();
        let view = cohort::teacher_view(&[&peer], student.feature_shape(), &batch.endpoint_rows())?;
        Ok(Self {
            student,
            teacher,
            batch,
            draws,
            hp: KdHyperparams::default(),
            view,
        })
    }

    fn student_with(&self, params: &[Tensor]) -> Network {
        let mut net = self.student.clone();
        net.params_mut().clone_from_slice(params);
        net
    }

    /// The student's tape at `params` with every term at full weight.
    fn tape(&self, params: &[Tensor], fixed_weights: Option<&[f64]>) -> Result<(NetworkTape, StudentTerms)> {
        let net = self.student_with(params);
        let mut tape = NetworkTape::run(&net, &self.batch, self.draws.mix_points[0], self.draws.lambda2, Mode::Train)?;
        let terms = cohort::assemble_student_loss(
            &mut tape.graph,
            &tape.plain,
            &tape.mixed,
            &self.view,
            &self.batch,
            &self.hp,
            1.0,
            fixed_weights,
        )?;
        Ok((tape, terms))
    }

    fn value(&self, term: Term, params: &[Tensor], fixed_weights: Option<&[f64]>) -> Result<f64> {
        let (tape, terms) = self.tape(params, fixed_weights)?;
        Ok(tape.graph.value(term.pick(&terms)).item())
    }

    /// Analytic gradient of `term` and the confidence weights used.
    pub fn analytic(&self, term: Term, fixed_weights: Option<&[f64]>) -> Result<(Vec<Tensor>, Vec<f64>)> {
        let params = self.student.params().to_vec();
        let (tape, terms) = self.tape(&params, fixed_weights)?;
        let mut g = tape.graph.backward(term.pick(&terms))?;
        let grads = tape
            .binding
            .params()
            .iter()
            .zip(&params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((grads, terms.weights))
    }

    /// Central differences of `term`. The endpoint term keeps its
    /// confidence weights at their unperturbed values.
    pub fn numeric(&self, term: Term, fixed_weights: Option<&[f64]>) -> Result<Vec<Tensor>> {
        let base = self.student.params().to_vec();
        let mut out = Vec::with_capacity(base.len());
        for (pi, p) in base.iter().enumerate() {
            let mut grad = Tensor::zeros(p.shape());
            for j in 0..p.numel() {
                let mut params = base.clone();
                params[pi].data_mut()[j] = p.data()[j] + STEP;
                let up = self.value(term, &params, fixed_weights)?;
                params[pi].data_mut()[j] = p.data()[j] - STEP;
                let down = self.value(term, &params, fixed_weights)?;
                grad.data_mut()[j] = (up - down) / (2.0 * STEP);
            }
            out.push(grad);
        }
        Ok(out)
    }

    pub fn check(&self, term: Term) -> Result<TermCheck> {
        let (analytic, weights) = self.analytic(term, None)?;
        let numeric = self.numeric(term, Some(&weights))?;
        Ok(compare(term, &analytic, &numeric))
    }

    /// Gradient reaching the teacher when both networks share one tape.
    pub fn teacher_gradient_max(&self) -> Result<f64> {
        let mut g = Graph::new();
        let mut tb = self.teacher.bind(&mut g, Mode::Train, true);
        let x = g.constant(self.batch.plain.clone());
        let m1 = g.constant(self.batch.m1.clone());
        let m2 = g.constant(self.batch.m2.clone());
        let t_plain = self.teacher.forward(&mut g, &mut tb, x)?;
        let t_mixed = self
            .teacher
            .forward_mixed(&mut g, &mut tb, m1, m2, self.draws.mix_points[1], self.draws.lambda2)?;
        let peer = PeerOutputs {
            plain: t_plain.values(&g),
            mixed: t_mixed.values(&g),
        };
        let view = cohort::teacher_view(&[&peer], self.student.feature_shape(), &self.batch.endpoint_rows())?;
        let mut sb = self.student.bind(&mut g, Mode::Train, true);
        let s_plain = self.student.forward(&mut g, &mut sb, x)?;
        let s_mixed = self
            .student
            .forward_mixed(&mut g, &mut sb, m1, m2, self.draws.mix_points[0], self.draws.lambda2)?;
        let terms = cohort::assemble_student_loss(&mut g, &s_plain, &s_mixed, &view, &self.batch, &self.hp, 1.0, None)?;
        let grads = g.backward(terms.total)?;
        Ok(tb
            .params()
            .iter()
            .filter_map(|&v| grads.get(v))
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m: f64, v| m.max(v.abs())))
    }

    pub fn detachment_diff(&self) -> Result<f64> {
        let (computed, weights) = self.analytic(Term::ELogit, None)?;
        let (constant, _) = self.analytic(Term::ELogit, Some(&weights))?;
        Ok(computed
            .iter()
            .zip(&constant)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }
}

fn compare(term: Term, analytic: &[Tensor], numeric: &[Tensor]) -> TermCheck {
    let mut check = TermCheck {
        term,
        coordinates: 0,
        within_rel: 0,
        max_abs_outside: 0.0,
        max_rel: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let abs = (x - y).abs();
            let scale = x.abs().max(y.abs());
            let rel = if scale == 0.0 { 0.0 } else { abs / scale };
            check.coordinates += 1;
            check.max_rel = check.max_rel.max(rel);
            if rel <= REL_TOL {
                check.within_rel += 1;
            } else {
                check.max_abs_outside = check.max_abs_outside.max(abs);
            }
        }
    }
    check
}

/// All checks on the toy setup drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let setup = Setup::toy(seed)?;
    let terms = Term::ALL.iter().map(|&t| setup.check(t)).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        student_parameters: setup.student.parameter_count(),
        terms,
        teacher_grad_max: setup.teacher_gradient_max()?,
        detachment_diff: setup.detachment_diff()?,
    })
}

pub fn describe(report: &GradcheckReport) -> String {
    let mut lines = vec![format!("student parameters: {}", report.student_parameters)];
    for t in &report.terms {
        lines.push(format!(
            "{:8} {}/{} within rel {REL_TOL:e}, max abs elsewhere {:.3e}, max rel {:.3e}: {}",
            t.term.to_string(),
            t.within_rel,
            t.coordinates,
            t.max_abs_outside,
            t.max_rel,
            if t.passed() { "ok" } else { "FAILED" }
        ));
    }
    lines.push(format!("teacher gradient max |g| = {:e}", report.teacher_grad_max));
    lines.push(format!("detached-weight gradient diff = {:e}", report.detachment_diff));
    lines.join("\n")
}
