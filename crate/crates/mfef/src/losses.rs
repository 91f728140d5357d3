//! Scalar objectives: temperature softmax, cross-entropy, KL distillation,
//! cohort aggregation, ramp-up weighting, and the T²-balanced total.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MfefError, Result};
use crate::tensor::{LabelBatch, Logits, ProbDist, Scalar};

const LOG_CLAMP: f64 = 1e-12;

/// Clamp a probability from below without laundering NaN (IEEE `max` would
/// turn NaN into the clamp value and hide a poisoned model).
#[inline]
fn clamp_prob<F: Scalar>(v: F, clamp: F) -> F {
    if v < clamp {
        clamp
    } else {
        v
    }
}

/// Temperature-softened softmax, computed with max-subtraction. Rows of the
/// result sum to 1.
pub fn softmax_t<F: Scalar>(z: &Logits<F>, t: F) -> Result<ProbDist<F>> {
    if t <= F::zero() {
        return Err(MfefError::InvalidConfig(format!(
            "softmax temperature must be positive, got {t}"
        )));
    }
    let mut out = Array2::<F>::zeros(z.data.dim());
    for (mut row_out, row) in out.rows_mut().into_iter().zip(z.data.rows()) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in row_out.iter_mut().zip(row.iter()) {
            let e = ((v - max) / t).exp();
            *o = e;
            sum = sum + e;
        }
        row_out.mapv_inplace(|e| e / sum);
    }
    Ok(ProbDist::new(out))
}

/// Mean over the batch of `-log p[label]`, with log clamping at 1e-12.
pub fn cross_entropy<F: Scalar>(p: &ProbDist<F>, labels: &LabelBatch) -> Result<F> {
    if p.batch() != labels.len() {
        return Err(MfefError::InvalidShape(format!(
            "cross entropy: {} probability rows vs {} labels",
            p.batch(),
            labels.len()
        )));
    }
    if p.classes() != labels.num_classes {
        return Err(MfefError::InvalidShape(format!(
            "cross entropy: {} classes vs labels over {}",
            p.classes(),
            labels.num_classes
        )));
    }
    let clamp = F::from_f64(LOG_CLAMP);
    let mut acc = F::zero();
    for (row, &label) in p.data.rows().into_iter().zip(labels.labels.iter()) {
        acc = acc - clamp_prob(row[label], clamp).ln();
    }
    Ok(acc / F::from_f64(p.batch() as f64))
}

/// Gradient of [`cross_entropy`] with respect to the logits that produced
/// `p` at temperature 1: `(p - onehot) / B`.
pub fn cross_entropy_grad<F: Scalar>(p: &ProbDist<F>, labels: &LabelBatch) -> Array2<F> {
    let b = F::from_f64(p.batch() as f64);
    let mut g = p.data.clone();
    for (mut row, &label) in g.rows_mut().into_iter().zip(labels.labels.iter()) {
        row[label] = row[label] - F::one();
        row.mapv_inplace(|v| v / b);
    }
    g
}

/// Mean over the batch of `KL(teacher || student)` with the `0·log(0/q) = 0`
/// convention.
pub fn kl_div<F: Scalar>(teacher: &ProbDist<F>, student: &ProbDist<F>) -> Result<F> {
    if teacher.data.dim() != student.data.dim() {
        return Err(MfefError::InvalidShape(format!(
            "kl_div shapes differ: {:?} vs {:?}",
            teacher.data.dim(),
            student.data.dim()
        )));
    }
    let clamp = F::from_f64(LOG_CLAMP);
    let mut acc = F::zero();
    for (t_row, s_row) in teacher.data.rows().into_iter().zip(student.data.rows()) {
        for (&tv, &sv) in t_row.iter().zip(s_row.iter()) {
            if tv > F::zero() {
                acc = acc + tv * (tv.ln() - clamp_prob(sv, clamp).ln());
            }
        }
    }
    Ok(acc / F::from_f64(teacher.batch() as f64))
}

/// Elementwise mean of the student logits.
pub fn aggregate_logits<F: Scalar>(z_list: &[Logits<F>]) -> Result<Logits<F>> {
    if z_list.is_empty() {
        return Err(MfefError::InvalidShape(
            "aggregate_logits needs at least one logit set".to_string(),
        ));
    }
    let dim = z_list[0].data.dim();
    let mut acc = Array2::<F>::zeros(dim);
    for z in z_list {
        if z.data.dim() != dim {
            return Err(MfefError::InvalidShape(format!(
                "aggregate_logits shapes differ: {:?} vs {:?}",
                dim,
                z.data.dim()
            )));
        }
        acc += &z.data;
    }
    acc.mapv_inplace(|v| v / F::from_f64(z_list.len() as f64));
    Logits::new(acc)
}

/// Aggregate-to-fusion distillation: `KL(softened aggregate || softened
/// fusion)`. The aggregate side is the (gradient-stopped) teacher.
pub fn loss_a_d<F: Scalar>(z_list: &[Logits<F>], fusion: &Logits<F>, t: F) -> Result<F> {
    let agg = aggregate_logits(z_list)?;
    kl_div(&softmax_t(&agg, t)?, &softmax_t(fusion, t)?)
}

/// Gradient of [`loss_a_d`] with respect to the fusion logits. The teacher
/// distribution is treated as a constant.
pub fn loss_a_d_grad_fusion<F: Scalar>(
    z_list: &[Logits<F>],
    fusion: &Logits<F>,
    t: F,
) -> Result<Array2<F>> {
    let agg = aggregate_logits(z_list)?;
    let teacher = softmax_t(&agg, t)?;
    let student = softmax_t(fusion, t)?;
    Ok(distill_grad_wrt_student(&teacher, &student, t))
}

/// Fusion-to-students distillation: `Σ_j KL(softened fusion || softened
/// student j)`. The fusion side is the (gradient-stopped) teacher.
pub fn loss_f_d<F: Scalar>(fusion: &Logits<F>, z_list: &[Logits<F>], t: F) -> Result<F> {
    let teacher = softmax_t(fusion, t)?;
    let mut acc = F::zero();
    for z in z_list {
        acc = acc + kl_div(&teacher, &softmax_t(z, t)?)?;
    }
    Ok(acc)
}

/// Per-student gradients of [`loss_f_d`] with respect to each student's
/// logits, teacher held constant.
pub fn loss_f_d_grad_students<F: Scalar>(
    fusion: &Logits<F>,
    z_list: &[Logits<F>],
    t: F,
) -> Result<Vec<Array2<F>>> {
    let teacher = softmax_t(fusion, t)?;
    z_list
        .iter()
        .map(|z| Ok(distill_grad_wrt_student(&teacher, &softmax_t(z, t)?, t)))
        .collect()
}

/// `d KL(teacher || softmax_t(z)) / dz = (student - teacher) / (T·B)` for a
/// fixed teacher.
pub fn distill_grad_wrt_student<F: Scalar>(
    teacher: &ProbDist<F>,
    student: &ProbDist<F>,
    t: F,
) -> Array2<F> {
    let scale = F::one() / (t * F::from_f64(teacher.batch() as f64));
    let mut g = &student.data - &teacher.data;
    g.mapv_inplace(|v| v * scale);
    g
}

/// Shape of the distillation ramp-up schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampShape {
    SquaredExponential,
    Linear,
}

impl Default for RampShape {
    fn default() -> Self {
        RampShape::SquaredExponential
    }
}

/// Ramp-up weight `λ(epoch)`, saturating at 1 after `alpha` epochs. The
/// default shape is `exp(-5·(1 - e/α)²)`.
pub fn ramp_weight(epoch: usize, alpha: f64) -> f64 {
    ramp_weight_shaped(epoch, alpha, RampShape::SquaredExponential)
}

pub fn ramp_weight_shaped(epoch: usize, alpha: f64, shape: RampShape) -> f64 {
    assert!(alpha > 0.0, "ramp alpha must be positive");
    let frac = ((epoch as f64) / alpha).min(1.0);
    match shape {
        RampShape::SquaredExponential => (-5.0 * (1.0 - frac) * (1.0 - frac)).exp(),
        RampShape::Linear => frac,
    }
}

/// Every scalar term of one training step, plus the balanced total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce_students: Vec<f64>,
    pub l_ce_fusion: f64,
    pub l_a_d: f64,
    pub l_f_d: f64,
    pub ramp_weight: f64,
    pub temperature: f64,
    pub total: f64,
}

/// Assembles the total objective
/// `Σ_j L_j^CE + L_f^CE + λ·T²·(L_a^D + L_f^D)`, rejecting non-finite parts
/// before aggregation.
pub fn total_loss(
    l_ce_students: &[f64],
    l_ce_fusion: f64,
    l_a_d: f64,
    l_f_d: f64,
    ramp: f64,
    temperature: f64,
) -> Result<LossBreakdown> {
    for (j, &v) in l_ce_students.iter().enumerate() {
        if !v.is_finite() {
            return Err(MfefError::NonFiniteLoss(format!(
                "student {j} cross-entropy = {v}"
            )));
        }
    }
    for (name, v) in [
        ("fusion cross-entropy", l_ce_fusion),
        ("aggregate-to-fusion KL", l_a_d),
        ("fusion-to-students KL", l_f_d),
        ("ramp weight", ramp),
    ] {
        if !v.is_finite() {
            return Err(MfefError::NonFiniteLoss(format!("{name} = {v}")));
        }
    }
    let ce: f64 = l_ce_students.iter().sum::<f64>() + l_ce_fusion;
    let total = ce + ramp * temperature * temperature * (l_a_d + l_f_d);
    Ok(LossBreakdown {
        l_ce_students: l_ce_students.to_vec(),
        l_ce_fusion,
        l_a_d,
        l_f_d,
        ramp_weight: ramp,
        temperature,
        total,
    })
}

/// Mean per-row Shannon entropy (nats); used to observe softening.
pub fn mean_entropy<F: Scalar>(p: &ProbDist<F>) -> f64 {
    let mut acc = 0.0;
    for row in p.data.rows() {
        for &v in row.iter() {
            let v = v.as_f64();
            if v > 0.0 {
                acc -= v * v.ln();
            }
        }
    }
    acc / p.batch() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use ndarray::array;

    fn logits2(rows: Vec<Vec<f64>>) -> Logits<f64> {
        let m = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        Logits::new(Array2::from_shape_vec((rows.len(), m), flat).unwrap()).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let z = logits2(vec![vec![0.0, 0.0, 0.0]]);
        for t in [0.5, 1.0, 3.0, 10.0] {
            let p = softmax_t(&z, t).unwrap();
            for &v in p.data.iter() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_frozen_value() {
        let z = logits2(vec![vec![1.0, 2.0, 3.0]]);
        let p = softmax_t(&z, 1.0).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in p.data.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(p.validate());
    }

    #[test]
    fn higher_temperature_increases_entropy() {
        let z = logits2(vec![vec![1.0, 2.0, 3.0]]);
        let e1 = mean_entropy(&softmax_t(&z, 1.0).unwrap());
        let e3 = mean_entropy(&softmax_t(&z, 3.0).unwrap());
        assert!(e3 > e1);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let z = logits2(vec![vec![1.0, 2.0]]);
        assert!(softmax_t(&z, 0.0).is_err());
        assert!(softmax_t(&z, -1.0).is_err());
    }

    #[test]
    fn softmax_shift_invariance_and_permutation_equivariance() {
        let mut rng = SeedRng::for_params(9);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..4).map(|_| rng.standard_normal() * 4.0).collect();
            let z = logits2(vec![vals.clone()]);
            let t = 0.5 + rng.uniform() * 5.0;
            let p = softmax_t(&z, t).unwrap();

            let c = rng.standard_normal() * 10.0;
            let shifted = logits2(vec![vals.iter().map(|v| v + c).collect()]);
            let ps = softmax_t(&shifted, t).unwrap();
            for (a, b) in p.data.iter().zip(ps.data.iter()) {
                assert!((a - b).abs() < 1e-12);
            }

            let perm = [2usize, 0, 3, 1];
            let permuted = logits2(vec![perm.iter().map(|&i| vals[i]).collect()]);
            let pp = softmax_t(&permuted, t).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                assert!((pp.data[[0, k]] - p.data[[0, i]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_entropy_frozen_values() {
        let onehot = ProbDist::new(array![[0.0f64, 1.0, 0.0]]);
        let labels = LabelBatch::from_slice(&[1], 3).unwrap();
        assert!(cross_entropy(&onehot, &labels).unwrap().abs() < 1e-12);

        let p = ProbDist::new(array![[0.25f64, 0.75]]);
        let labels = LabelBatch::from_slice(&[1], 2).unwrap();
        let got = cross_entropy(&p, &labels).unwrap();
        assert!((got - 0.2876820724517809).abs() < 1e-15);

        let uniform = ProbDist::new(Array2::from_elem((1, 10), 0.1f64));
        let labels = LabelBatch::from_slice(&[7], 10).unwrap();
        let got = cross_entropy(&uniform, &labels).unwrap();
        assert!((got - 2.302585092994046).abs() < 1e-14);
    }

    #[test]
    fn kl_frozen_values_and_nonnegativity() {
        let t = ProbDist::new(array![[0.5f64, 0.5]]);
        assert!(kl_div(&t, &t).unwrap().abs() < 1e-15);

        let s = ProbDist::new(array![[0.25f64, 0.75]]);
        let got = kl_div(&t, &s).unwrap();
        assert!((got - 0.14384103622589045).abs() < 1e-15);

        let mut rng = SeedRng::for_params(4);
        for _ in 0..100 {
            let za = logits2(vec![(0..5).map(|_| rng.standard_normal() * 3.0).collect()]);
            let zb = logits2(vec![(0..5).map(|_| rng.standard_normal() * 3.0).collect()]);
            let pa = softmax_t(&za, 1.0).unwrap();
            let pb = softmax_t(&zb, 1.0).unwrap();
            assert!(kl_div(&pa, &pb).unwrap() >= 0.0, "Gibbs inequality violated");
        }
    }

    #[test]
    fn aggregate_is_elementwise_mean() {
        let z1 = logits2(vec![vec![0.0, 2.0]]);
        let z2 = logits2(vec![vec![2.0, 0.0]]);
        let agg = aggregate_logits(&[z1.clone(), z2]).unwrap();
        assert_eq!(agg.data, array![[1.0, 1.0]]);

        let same = aggregate_logits(&[z1.clone(), z1.clone(), z1.clone()]).unwrap();
        assert_eq!(same.data, z1.data);

        let mut rng = SeedRng::for_params(6);
        let zs: Vec<Logits<f64>> = (0..3)
            .map(|_| logits2(vec![(0..4).map(|_| rng.standard_normal()).collect()]))
            .collect();
        let agg = aggregate_logits(&zs).unwrap();
        for m in 0..4 {
            let brute = (zs[0].data[[0, m]] + zs[1].data[[0, m]] + zs[2].data[[0, m]]) / 3.0;
            assert!((agg.data[[0, m]] - brute).abs() < 1e-12);
        }

        assert!(aggregate_logits::<f64>(&[]).is_err());
    }

    #[test]
    fn loss_a_d_frozen_values() {
        let z1 = logits2(vec![vec![0.0, 2.0]]);
        let z2 = logits2(vec![vec![2.0, 0.0]]);
        let fusion_uniform = logits2(vec![vec![0.0, 0.0]]);
        let v = loss_a_d(&[z1, z2], &fusion_uniform, 3.0).unwrap();
        assert!(v.abs() < 1e-15, "softened aggregate of mirrored logits is uniform");

        let z = logits2(vec![vec![2.0, 0.0]]);
        let fusion = logits2(vec![vec![0.0, 2.0]]);
        let v = loss_a_d(&[z.clone(), z.clone()], &fusion, 1.0).unwrap();
        assert!((v - 1.5231883119115297).abs() < 1e-12);

        let same = logits2(vec![vec![0.3, -1.2]]);
        assert!(loss_a_d(&[same.clone(), same.clone()], &same, 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn loss_f_d_frozen_values() {
        let fusion = logits2(vec![vec![0.0, 2.0]]);
        let s1 = logits2(vec![vec![0.0, 2.0]]);
        let s2 = logits2(vec![vec![2.0, 0.0]]);
        let v = loss_f_d(&fusion, &[s1.clone(), s2], 1.0).unwrap();
        assert!((v - 1.5231883119115297).abs() < 1e-12);

        let v = loss_f_d(&fusion, &[s1.clone(), s1.clone()], 1.0).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn distill_gradient_matches_stop_gradient_finite_differences() {
        // Teacher held constant: the analytic gradient must match central
        // differences of KL(teacher || softmax_t(z)) in z.
        let mut rng = SeedRng::for_params(8);
        for _ in 0..10 {
            let vals: Vec<f64> = (0..4).map(|_| rng.standard_normal() * 2.0).collect();
            let teacher = softmax_t(
                &logits2(vec![(0..4).map(|_| rng.standard_normal() * 2.0).collect()]),
                2.0,
            )
            .unwrap();
            let z = logits2(vec![vals.clone()]);
            let analytic =
                distill_grad_wrt_student(&teacher, &softmax_t(&z, 2.0).unwrap(), 2.0);
            let h = 1e-6;
            for m in 0..4 {
                let mut up = vals.clone();
                up[m] += h;
                let mut down = vals.clone();
                down[m] -= h;
                let lu = kl_div(&teacher, &softmax_t(&logits2(vec![up]), 2.0).unwrap()).unwrap();
                let ld =
                    kl_div(&teacher, &softmax_t(&logits2(vec![down]), 2.0).unwrap()).unwrap();
                let numeric = (lu - ld) / (2.0 * h);
                assert!(
                    crate::gradcheck::rel_err(analytic[[0, m]], numeric) < 1e-6,
                    "stop-gradient contract broken at coord {m}"
                );
            }
        }
    }

    #[test]
    fn ramp_weight_schedule() {
        assert!((ramp_weight(0, 80.0) - 0.006737946999085467).abs() < 1e-15);
        assert_eq!(ramp_weight(80, 80.0), 1.0);
        assert_eq!(ramp_weight(200, 80.0), 1.0);
        let mut prev = 0.0;
        for e in 0..=80 {
            let lam = ramp_weight(e, 80.0);
            assert!(lam >= prev, "ramp must be nondecreasing");
            prev = lam;
        }
        assert_eq!(ramp_weight_shaped(40, 80.0, RampShape::Linear), 0.5);
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(&[1.0, 1.0], 0.5, 0.1, 0.2, 1.0, 3.0).unwrap();
        assert!((b.total - 5.2).abs() < 1e-12);

        let b = total_loss(&[1.0, 1.0], 0.5, 0.0, 0.0, 0.3, 3.0).unwrap();
        assert_eq!(b.total, 2.5);

        let b = total_loss(&[0.7], 0.3, 0.25, 0.75, 1.0, 1.0).unwrap();
        assert!((b.total - 2.0).abs() < 1e-12, "T=1, λ=1 is plain CE + KL");

        // Doubling both KL parts doubles the distillation contribution.
        let a = total_loss(&[1.0], 0.0, 0.1, 0.2, 0.5, 3.0).unwrap();
        let d = total_loss(&[1.0], 0.0, 0.2, 0.4, 0.5, 3.0).unwrap();
        assert!(((d.total - 1.0) - 2.0 * (a.total - 1.0)).abs() < 1e-12);

        assert!(total_loss(&[f64::NAN], 0.0, 0.0, 0.0, 1.0, 3.0).is_err());
        assert!(total_loss(&[1.0], f64::INFINITY, 0.0, 0.0, 1.0, 3.0).is_err());
    }
}
