//! Rank-one measurements of feature matrices and the linear classifier head.
//!
//! Class index 0 is the false class (label 1), so the one-hot target of a
//! false post is `[1, 0]`.

use crate::cmat::CMat;
use crate::encoder::DensityMatrix;
use crate::error::{Error, Result};
use crate::graph::{logsumexp, Graph, NodeId, ParamStore};

pub const DEFAULT_MEASUREMENTS: usize = 16;
pub const CLASSES: usize = 2;

/// Measurement states `v₁…v_Z` (rows of a `Z × d` matrix) plus a
/// `2 × width` real classifier weight and `1 × 2` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementBank {
    states: CMat,
    weight: CMat,
    bias: CMat,
}

impl MeasurementBank {
    pub fn new(states: CMat, weight: CMat, bias: CMat) -> Result<Self> {
        if states.rows() == 0 || states.cols() == 0 {
            return Err(Error::Argument("measurement bank needs Z ≥ 1 states of dimension ≥ 1".into()));
        }
        if weight.rows() != CLASSES || weight.cols() == 0 || !weight.cols().is_multiple_of(states.rows()) {
            return Err(Error::shape("classifier weight", (CLASSES, 4 * states.rows()), weight.shape()));
        }
        if bias.shape() != (1, CLASSES) {
            return Err(Error::shape("classifier bias", (1, CLASSES), bias.shape()));
        }
        if !weight.is_real() || !bias.is_real() {
            return Err(Error::Argument("classifier parameters must be real".into()));
        }
        Ok(Self { states, weight, bias })
    }

    pub fn states(&self) -> &CMat {
        &self.states
    }

    pub fn weight(&self) -> &CMat {
        &self.weight
    }

    pub fn bias(&self) -> &CMat {
        &self.bias
    }

    pub fn z(&self) -> usize {
        self.states.rows()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    /// Classifier input width (4Z signed, 2Z co).
    pub fn width(&self) -> usize {
        self.weight.cols()
    }
}

/// Classifier output for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub logits: [f64; CLASSES],
    pub probabilities: [f64; CLASSES],
    pub loss: f64,
}

impl Classification {
    /// Predicted label (1 = false); ties go to the false class.
    pub fn label(&self) -> u8 {
        if self.probabilities[0] >= self.probabilities[1] {
            1
        } else {
            0
        }
    }

    pub fn p_false(&self) -> f64 {
        self.probabilities[0]
    }
}

/// Classifier index of a dataset label.
pub fn target_index(label: u8) -> Result<usize> {
    match label {
        0 => Ok(1),
        1 => Ok(0),
        other => Err(Error::Argument(format!("label must be 0 or 1, got {other}"))),
    }
}

/// `1 × Z` real row `q_i = Re⟨u_i|ρ|u_i⟩` with `u_i = v_i / ‖v_i‖`.
pub(crate) fn measure_node(g: &mut Graph, rho: NodeId, states: NodeId) -> Result<NodeId> {
    let u = g.cnormalize_rows(states)?;
    let ut = g.transpose(u);
    let x = g.matmul(rho, ut)?;
    let xt = g.transpose(x);
    let uc = g.conj(u);
    let sandwich = g.mul(uc, xt)?;
    let col = g.row_sum(sandwich);
    let row = g.transpose(col);
    Ok(g.real_part(row))
}

/// `logits = q · weightᵀ + bias` for a real `1 × width` row `q`.
pub(crate) fn logits_node(g: &mut Graph, q: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let wt = g.transpose(weight);
    let lin = g.matmul(q, wt)?;
    g.add(lin, bias)
}

/// Measurement vector of one (proper or feature) density matrix.
pub fn measure(rho: &DensityMatrix, bank: &MeasurementBank) -> Result<Vec<f64>> {
    if rho.dim() != bank.dim() {
        return Err(Error::shape("measure", (bank.dim(), bank.dim()), rho.mat().shape()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let r = g.constant(rho.mat().clone());
    let v = g.constant(bank.states.clone());
    let q = measure_node(&mut g, r, v)?;
    Ok(g.value(q).re().to_vec())
}

/// Logits, probabilities and cross-entropy loss of a concatenated
/// measurement vector.
pub fn classify_loss(q: &[f64], label: u8, bank: &MeasurementBank) -> Result<Classification> {
    if q.len() != bank.width() {
        return Err(Error::shape("classify_loss", (1, bank.width()), (1, q.len())));
    }
    let target = target_index(label)?;
    let mut logits = [0.0; CLASSES];
    for (c, out) in logits.iter_mut().enumerate() {
        let row = &bank.weight.re()[c * q.len()..(c + 1) * q.len()];
        *out = row.iter().zip(q).map(|(w, x)| w * x).sum::<f64>() + bank.bias.re()[c];
    }
    Ok(classification(logits, target))
}

pub(crate) fn classification(logits: [f64; CLASSES], target: usize) -> Classification {
    let lse = logsumexp(&logits);
    let probabilities = logits.map(|l| (l - lse).exp());
    Classification {
        logits,
        probabilities,
        loss: lse - logits[target],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{mixture, word_to_state, DensityKind};
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::graph::ParamKind;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_cmat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
        let re = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        CMat::from_parts(rows, cols, re, im).unwrap()
    }

    fn random_rho(rng: &mut ChaCha8Rng, d: usize) -> DensityMatrix {
        let m = rng.random_range(1..6);
        let words: Vec<_> = (0..m)
            .map(|_| {
                let r: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
                let p: Vec<f64> = (0..d).map(|_| rng.random_range(-PI..PI)).collect();
                word_to_state(&r, &p).unwrap()
            })
            .collect();
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        mixture(&words, &logits).unwrap()
    }

    fn bank(states: CMat) -> MeasurementBank {
        let z = states.rows();
        MeasurementBank::new(states, CMat::zeros(2, 4 * z), CMat::zeros(1, 2)).unwrap()
    }

    fn sandwich(rho: &CMat, v: &[Complex64]) -> f64 {
        let d = v.len();
        let norm: f64 = v.iter().map(|x| x.norm_sqr()).sum();
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..d {
            for b in 0..d {
                let (re, im) = rho.get(a, b);
                acc += v[a].conj() * Complex64::new(re, im) * v[b];
            }
        }
        acc.re / norm
    }

    #[test]
    fn self_measurement_and_orthogonality() {
        let e1 = word_to_state(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap();
        let rho = DensityMatrix::pure(&e1.to_cmat()).unwrap();
        let states = CMat::from_real(2, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let q = measure(&rho, &bank(states)).unwrap();
        assert_abs_diff_eq!(q[0], 1.0, epsilon = 1e-15);
        assert_eq!(q[1], 0.0);
    }

    #[test]
    fn matches_sandwich_oracle_and_completeness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        for _ in 0..20 {
            let rho = random_rho(&mut rng, d);
            let states = random_cmat(&mut rng, 4, d);
            let q = measure(&rho, &bank(states.clone())).unwrap();
            for (i, qi) in q.iter().enumerate() {
                let v: Vec<Complex64> = (0..d).map(|j| Complex64::new(states.get(i, j).0, states.get(i, j).1)).collect();
                assert_abs_diff_eq!(*qi, sandwich(rho.mat(), &v), epsilon = 1e-12);
                assert!((-1e-10..=1.0 + 1e-9).contains(qi));
            }
            let full = measure(&rho, &bank(CMat::identity(d))).unwrap();
            assert_abs_diff_eq!(full.iter().sum::<f64>(), 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn invariant_to_complex_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = random_rho(&mut rng, 4);
        let states = random_cmat(&mut rng, 3, 4);
        let q = measure(&rho, &bank(states.clone())).unwrap();
        let q2 = measure(&rho, &bank(states.scale_complex((-3.5, 0.7)))).unwrap();
        for (a, b) in q.iter().zip(&q2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn degenerate_state_is_rejected() {
        let rho = DensityMatrix::new(CMat::identity(2).scale(0.5), DensityKind::Proper).unwrap();
        let states = CMat::from_real(2, 2, vec![1.0, 0.0, 0.0, 1e-13]).unwrap();
        let err = measure(&rho, &bank(states)).unwrap_err();
        assert!(matches!(err, Error::DegenerateProjector { index: 1, .. }));
    }

    #[test]
    fn classifier_examples() {
        let b = MeasurementBank::new(CMat::identity(1), CMat::zeros(2, 4), CMat::zeros(1, 2)).unwrap();
        let c = classify_loss(&[0.3, 0.1, 0.2, 0.9], 0, &b).unwrap();
        assert_eq!(c.probabilities, [0.5, 0.5]);
        assert_abs_diff_eq!(c.loss, std::f64::consts::LN_2, epsilon = 1e-15);

        let sat = MeasurementBank::new(CMat::identity(1), CMat::zeros(2, 4), CMat::from_real(1, 2, vec![10.0, -10.0]).unwrap()).unwrap();
        let c = classify_loss(&[0.0; 4], 1, &sat).unwrap();
        assert!(c.loss < 1e-4);
        assert_eq!(c.label(), 1);
        assert!(classify_loss(&[0.0; 3], 1, &sat).is_err());
        assert!(classify_loss(&[0.0; 4], 2, &sat).is_err());
    }

    #[test]
    fn cross_entropy_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let w = CMat::from_real(2, 4, (0..8).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let bias = CMat::from_real(1, 2, vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).unwrap();
            let b = MeasurementBank::new(CMat::identity(1), w.clone(), bias.clone()).unwrap();
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let label = rng.random_range(0..2u8);
            let c = classify_loss(&q, label, &b).unwrap();
            let l: Vec<f64> = (0..2)
                .map(|k| (0..4).map(|j| w.re()[k * 4 + j] * q[j]).sum::<f64>() + bias.re()[k])
                .collect();
            let target = if label == 1 { 0 } else { 1 };
            let expect = -(l[target].exp() / (l[0].exp() + l[1].exp())).ln();
            assert_abs_diff_eq!(c.loss, expect, epsilon = 1e-12);
            assert_abs_diff_eq!(c.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(c.loss >= 0.0);
        }
    }

    #[test]
    fn gradients_through_measure_and_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let rho_s = random_rho(&mut rng, d);
        let feat = DensityMatrix::new(random_cmat(&mut rng, d, d), DensityKind::Feature).unwrap();
        let mut store = ParamStore::new();
        let v = store.add("states", random_cmat(&mut rng, 2, d), ParamKind::Complex).unwrap();
        let w = store
            .add("weight", CMat::from_real(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), ParamKind::Real)
            .unwrap();
        let b = store.add("bias", CMat::from_real(1, 2, vec![0.1, -0.2]).unwrap(), ParamKind::Real).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new(s);
                let vs = g.param(v);
                let r1 = g.constant(rho_s.mat().clone());
                let r2 = g.constant(feat.mat().clone());
                let q1 = measure_node(&mut g, r1, vs)?;
                let q2 = measure_node(&mut g, r2, vs)?;
                let q = g.hconcat(&[q1, q2])?;
                let (wn, bn) = (g.param(w), g.param(b));
                let logits = logits_node(&mut g, q, wn, bn)?;
                let loss = g.cross_entropy(logits, 0)?;
                Ok((g.value(loss).re()[0], g.backward(loss)?))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
