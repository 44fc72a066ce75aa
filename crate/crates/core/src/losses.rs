//! Loss functions and their gradients w.r.t. logits.
//!
//! All batch losses reduce by the arithmetic mean over rows. Teacher logits
//! are raw scores; they are temperature-softmaxed here, never by the teacher.

use serde::{Deserialize, Serialize};

use crate::nn::ModelParams;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    /// Gradient w.r.t. the logits, `batch_size x num_classes`.
    pub grad: Matrix,
}

/// Argument order of the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student || teacher)`.
    #[default]
    StudentFirst,
    /// `KL(teacher || student)`, the usual distillation direction.
    TeacherFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the cross-entropy term; `1 - lambda` weighs distillation.
    pub lambda: f64,
    pub temperature: f64,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.5,
            temperature: 1.0,
            kl_direction: KlDirection::StudentFirst,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "distill.lambda",
                format!("must lie in [0, 1], got {}", self.lambda),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(
                "distill.temperature",
                format!("must be positive, got {}", self.temperature),
            ));
        }
        Ok(())
    }
}

fn log_softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v / temperature - max;
        sum += o.exp();
    }
    let log_sum = sum.ln();
    for o in out.iter_mut() {
        *o -= log_sum;
    }
}

pub fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    log_softmax_into(row, temperature, &mut out);
    out
}

/// Max-subtracted softmax of `row / temperature`.
pub fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
    let mut out: Vec<f64> = row.iter().map(|&v| (v / temperature - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= logits.cols()) {
        return Err(Error::Validation(format!(
            "label {l} at row {i} is out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood; gradient `(softmax - one_hot) / batch_size`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossValueAndGrad> {
    check_labels(logits, labels)?;
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let g = grad.row_mut(r);
        log_softmax_into(logits.row(r), 1.0, g);
        total -= g[label];
        for v in g.iter_mut() {
            *v = v.exp();
        }
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok(LossValueAndGrad {
        value: total / n,
        grad,
    })
}

/// Adds one teacher's mean KL term into `grad`, returning its value.
fn kl_single(
    student: &Matrix,
    teacher: &Matrix,
    temperature: f64,
    direction: KlDirection,
    grad: &mut Matrix,
) -> f64 {
    let n = student.rows() as f64;
    let cols = student.cols();
    let mut log_s = vec![0.0; cols];
    let mut log_t = vec![0.0; cols];
    let mut total = 0.0;
    for r in 0..student.rows() {
        log_softmax_into(student.row(r), temperature, &mut log_s);
        log_softmax_into(teacher.row(r), temperature, &mut log_t);
        let g = grad.row_mut(r);
        match direction {
            KlDirection::StudentFirst => {
                // d/dz KL(s||t) = s * (a - KL) / T with a = log s - log t
                let kl: f64 = log_s
                    .iter()
                    .zip(&log_t)
                    .map(|(ls, lt)| ls.exp() * (ls - lt))
                    .sum();
                total += kl;
                for k in 0..cols {
                    let a = log_s[k] - log_t[k];
                    g[k] += log_s[k].exp() * (a - kl) / temperature / n;
                }
            }
            KlDirection::TeacherFirst => {
                // d/dz KL(t||s) = (s - t) / T
                let kl: f64 = log_t
                    .iter()
                    .zip(&log_s)
                    .map(|(lt, ls)| lt.exp() * (lt - ls))
                    .sum();
                total += kl;
                for k in 0..cols {
                    g[k] += (log_s[k].exp() - log_t[k].exp()) / temperature / n;
                }
            }
        }
    }
    total / n
}

/// Sum over teachers of the batch-mean KL divergence between the
/// temperature-softened student and teacher distributions. Teachers are
/// constants: the gradient is w.r.t. `student` only.
pub fn kl_distill(
    student: &Matrix,
    teachers: &[Matrix],
    cfg: &DistillConfig,
) -> Result<LossValueAndGrad> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(Error::Validation("distillation needs at least one teacher".into()));
    }
    if student.rows() == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if let Some((m, t)) = teachers
        .iter()
        .enumerate()
        .find(|(_, t)| t.shape() != student.shape())
    {
        return Err(Error::Shape(format!(
            "teacher {m} logits are {:?}, student logits are {:?}",
            t.shape(),
            student.shape()
        )));
    }
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut value = 0.0;
    for t in teachers {
        value += kl_single(student, t, cfg.temperature, cfg.kl_direction, &mut grad);
    }
    Ok(LossValueAndGrad { value, grad })
}

/// `lambda * CE + (1 - lambda) * KL`. The endpoints return the pure
/// component unchanged, so an empty teacher list is allowed at `lambda = 1`.
pub fn combined_loss(
    student: &Matrix,
    labels: &[usize],
    teachers: &[Matrix],
    cfg: &DistillConfig,
) -> Result<LossValueAndGrad> {
    cfg.validate()?;
    if cfg.lambda == 1.0 {
        return cross_entropy(student, labels);
    }
    if teachers.is_empty() {
        return Err(Error::config(
            "distill.lambda",
            format!("lambda {} < 1 requires at least one teacher", cfg.lambda),
        ));
    }
    if cfg.lambda == 0.0 {
        check_labels(student, labels)?;
        return kl_distill(student, teachers, cfg);
    }
    let ce = cross_entropy(student, labels)?;
    let kl = kl_distill(student, teachers, cfg)?;
    let (a, b) = (cfg.lambda, 1.0 - cfg.lambda);
    let mut grad = ce.grad;
    for (g, k) in grad.as_mut_slice().iter_mut().zip(kl.grad.as_slice()) {
        *g = a * *g + b * k;
    }
    Ok(LossValueAndGrad {
        value: a * ce.value + b * kl.value,
        grad,
    })
}

/// FedProx penalty `(mu / 2) * ||local - global||^2` and its gradient.
pub fn proximal_penalty(
    local: &ModelParams,
    global_ref: &ModelParams,
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    if local.arch() != global_ref.arch() {
        return Err(Error::Validation(
            "proximal penalty between models of different architectures".into(),
        ));
    }
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::config("federation.mu", format!("must be non-negative, got {mu}")));
    }
    if mu == 0.0 {
        return Ok((0.0, vec![0.0; local.len()]));
    }
    let mut sq = 0.0;
    let grad = local
        .values()
        .iter()
        .zip(global_ref.values())
        .map(|(l, g)| {
            let d = l - g;
            sq += d * d;
            mu * d
        })
        .collect();
    Ok((0.5 * mu * sq, grad))
}

/// Deep-mutual-learning losses for an FML client: each model minimizes
/// `beta * CE + (1 - beta) * KL(self || other)` with the other model's
/// distribution held constant.
pub fn mutual_learning_losses(
    proxy_logits: &Matrix,
    private_logits: &Matrix,
    labels: &[usize],
    beta: f64,
) -> Result<(LossValueAndGrad, LossValueAndGrad)> {
    if proxy_logits.shape() != private_logits.shape() {
        return Err(Error::Shape(format!(
            "proxy logits {:?} vs private logits {:?}",
            proxy_logits.shape(),
            private_logits.shape()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config("federation.beta", format!("must lie in [0, 1], got {beta}")));
    }
    let cfg = DistillConfig {
        lambda: beta,
        temperature: 1.0,
        kl_direction: KlDirection::StudentFirst,
    };
    let proxy = combined_loss(
        proxy_logits,
        labels,
        std::slice::from_ref(private_logits),
        &cfg,
    )?;
    let private = combined_loss(
        private_logits,
        labels,
        std::slice::from_ref(proxy_logits),
        &cfg,
    )?;
    Ok((proxy, private))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchDescriptor, Norm};
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn probs_to_logits(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);
        let p = softmax(&[3f64.ln(), 0.0], 1.0);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let big = softmax(&[1000.0, 0.0], 1.0);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-15 && big[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&m(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert!((ce.value - std::f64::consts::LN_2).abs() < 1e-15);
        let confident = cross_entropy(&m(&[&[50.0, -50.0]]), &[0]).unwrap();
        assert!(confident.value >= 0.0 && confident.value < 1e-40);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            cross_entropy(&m(&[&[0.0, 0.0]]), &[2]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn kl_zero_on_identical_inputs() {
        let s = m(&[&[0.3, -1.2, 2.0], &[1.0, 1.0, 0.0]]);
        for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
            let cfg = DistillConfig {
                lambda: 0.0,
                temperature: 2.0,
                kl_direction: dir,
            };
            let kl = kl_distill(&s, std::slice::from_ref(&s), &cfg).unwrap();
            assert_eq!(kl.value, 0.0);
            assert!(kl.grad.as_slice().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn kl_student_first_by_hand() {
        let s = m(&[&probs_to_logits(&[0.5, 0.5])]);
        let t = m(&[&probs_to_logits(&[0.25, 0.75])]);
        let kl = kl_distill(&s, &[t], &DistillConfig::default()).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl.value - expected).abs() < 1e-12);
        assert!((kl.value - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn two_identical_teachers_double_exactly() {
        let s = m(&[&[0.1, 0.7, -0.4]]);
        let t = m(&[&[1.0, -1.0, 0.5]]);
        let cfg = DistillConfig::default();
        let one = kl_distill(&s, std::slice::from_ref(&t), &cfg).unwrap();
        let two = kl_distill(&s, &[t.clone(), t], &cfg).unwrap();
        assert_eq!(two.value, 2.0 * one.value);
        for (a, b) in two.grad.as_slice().iter().zip(one.grad.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn kl_errors() {
        let s = m(&[&[0.0, 0.0]]);
        let cfg = DistillConfig::default();
        assert!(matches!(kl_distill(&s, &[], &cfg), Err(Error::Validation(_))));
        assert!(matches!(
            kl_distill(&s, &[m(&[&[0.0, 0.0, 0.0]])], &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn combined_endpoints_and_mix() {
        let s = m(&[&[0.2, -0.3, 1.0], &[0.0, 0.5, 0.5]]);
        let t = m(&[&[1.0, 0.0, 0.0], &[-1.0, 2.0, 0.0]]);
        let labels = [2, 1];
        let mut cfg = DistillConfig {
            lambda: 1.0,
            ..Default::default()
        };
        assert_eq!(
            combined_loss(&s, &labels, std::slice::from_ref(&t), &cfg).unwrap(),
            cross_entropy(&s, &labels).unwrap()
        );
        assert_eq!(
            combined_loss(&s, &labels, &[], &cfg).unwrap(),
            cross_entropy(&s, &labels).unwrap()
        );
        cfg.lambda = 0.0;
        assert_eq!(
            combined_loss(&s, &labels, std::slice::from_ref(&t), &cfg).unwrap(),
            kl_distill(&s, std::slice::from_ref(&t), &cfg).unwrap()
        );
        cfg.lambda = 0.5;
        let ce = cross_entropy(&s, &labels).unwrap().value;
        let kl = kl_distill(&s, std::slice::from_ref(&t), &cfg).unwrap().value;
        let mixed = combined_loss(&s, &labels, &[t], &cfg).unwrap().value;
        assert!((mixed - (0.5 * ce + 0.5 * kl)).abs() < 1e-15);
        assert!(matches!(
            combined_loss(&s, &labels, &[], &cfg),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn combined_weighting_by_hand() {
        // 0.5 * 0.6 + 0.5 * 0.2
        assert!((0.5f64 * 0.6 + 0.5 * 0.2 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn proximal_examples() {
        let arch = ArchDescriptor::new(1, vec![], 2, Norm::None).unwrap();
        let local = ModelParams::new(arch.clone(), vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let global = ModelParams::zeros(arch.clone()).unwrap();
        let (v, g) = proximal_penalty(&local, &global, 1.0).unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(g, vec![1.0, 2.0, 0.0, 0.0]);
        let (v, g) = proximal_penalty(&local, &local, 3.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, g) = proximal_penalty(&local, &global, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        let other = ArchDescriptor::new(2, vec![], 2, Norm::None).unwrap();
        let other = ModelParams::zeros(other).unwrap();
        assert!(matches!(
            proximal_penalty(&local, &other, 1.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn mutual_learning_degenerate_cases() {
        let a = m(&[&[0.5, -0.5, 0.1]]);
        let labels = [1];
        let ce = cross_entropy(&a, &labels).unwrap();
        let (p, q) = mutual_learning_losses(&a, &a, &labels, 0.3).unwrap();
        assert!((p.value - 0.3 * ce.value).abs() < 1e-15);
        assert!((q.value - 0.3 * ce.value).abs() < 1e-15);

        let b = m(&[&[2.0, 0.0, -1.0]]);
        let (p, q) = mutual_learning_losses(&a, &b, &labels, 1.0).unwrap();
        assert_eq!(p, ce);
        assert_eq!(q, cross_entropy(&b, &labels).unwrap());

        assert!(matches!(
            mutual_learning_losses(&a, &m(&[&[0.0, 0.0]]), &labels, 0.5),
            Err(Error::Shape(_))
        ));
    }

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.as_slice().len())
            .map(|i| {
                let mut p = x.clone();
                p.as_mut_slice()[i] += h;
                let mut q = x.clone();
                q.as_mut_slice()[i] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn logits_strategy(rows: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * 3)
            .prop_map(move |v| Matrix::from_vec(rows, 3, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ce_gradient_and_row_sums(x in logits_strategy(4), labels in proptest::collection::vec(0usize..3, 4)) {
            let ce = cross_entropy(&x, &labels).unwrap();
            prop_assert!(ce.value >= 0.0);
            let num = numeric_grad(&x, |p| cross_entropy(p, &labels).unwrap().value);
            for (a, n) in ce.grad.as_slice().iter().zip(&num) {
                prop_assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
            }
            for row in ce.grad.iter_rows() {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-8);
            }
        }

        #[test]
        fn kl_gradient_both_directions(
            x in logits_strategy(3),
            t1 in logits_strategy(3),
            t2 in logits_strategy(3),
            temperature in prop_oneof![Just(1.0), Just(2.0)],
            teacher_first in any::<bool>(),
        ) {
            let cfg = DistillConfig {
                lambda: 0.0,
                temperature,
                kl_direction: if teacher_first { KlDirection::TeacherFirst } else { KlDirection::StudentFirst },
            };
            let teachers = [t1.clone(), t2.clone()];
            let kl = kl_distill(&x, &teachers, &cfg).unwrap();
            prop_assert!(kl.value >= 0.0);
            let num = numeric_grad(&x, |p| kl_distill(p, &teachers, &cfg).unwrap().value);
            for (a, n) in kl.grad.as_slice().iter().zip(&num) {
                prop_assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
            for row in kl.grad.iter_rows() {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-8);
            }
            let split = kl_distill(&x, &[t1], &cfg).unwrap().value + kl_distill(&x, &[t2], &cfg).unwrap().value;
            prop_assert!((split - kl.value).abs() < 1e-12);
        }

        #[test]
        fn mutual_gradients(
            a in logits_strategy(3),
            b in logits_strategy(3),
            labels in proptest::collection::vec(0usize..3, 3),
            beta in 0.0f64..1.0,
        ) {
            let (p, q) = mutual_learning_losses(&a, &b, &labels, beta).unwrap();
            let num_p = numeric_grad(&a, |x| mutual_learning_losses(x, &b, &labels, beta).unwrap().0.value);
            let num_q = numeric_grad(&b, |x| mutual_learning_losses(&a, x, &labels, beta).unwrap().1.value);
            for (g, n) in p.grad.as_slice().iter().zip(&num_p).chain(q.grad.as_slice().iter().zip(&num_q)) {
                prop_assert!(rel_err(*g, *n) < 1e-6, "{g} vs {n}");
            }
        }

        #[test]
        fn softmax_is_a_distribution(row in proptest::collection::vec(-50.0f64..50.0, 1..8), t in 0.5f64..4.0) {
            let p = softmax(&row, t);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
