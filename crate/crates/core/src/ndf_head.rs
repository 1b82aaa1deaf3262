//! Neutral-subtracted features, the linear softmax classifier and its
//! cross-entropy loss.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::datamodel::{ClassIndex, FeatureVector};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Param, Real};

/// Probability floor applied by [`ce_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of times [`ce_loss`] clamped a zero probability.
pub fn clamp_warnings() -> usize {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

/// `K × D` weights with an optional per-class bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T> {
    pub k: usize,
    pub d: usize,
    pub theta: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> ClassifierParams<T> {
    pub fn zeros(k: usize, d: usize, bias: bool) -> Self {
        Self {
            k,
            d,
            theta: Param::new(vec![T::zero(); k * d]),
            bias: bias.then(|| Param::new(vec![T::zero(); k])),
        }
    }

    /// Uniform `±1/√D` initialization.
    pub fn init(k: usize, d: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut p = Self::zeros(k, d, bias);
        for v in p.theta.value.iter_mut() {
            *v = T::lit(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.theta];
        if let Some(b) = self.bias.as_mut() {
            v.push(b);
        }
        v
    }
}

/// `V_tar − V_ref`.
pub fn compute_ndf(v_tar: &FeatureVector, v_ref: &FeatureVector) -> Result<FeatureVector> {
    if v_tar.len() != v_ref.len() {
        return Err(Error::Shape(format!(
            "feature lengths {} and {}",
            v_tar.len(),
            v_ref.len()
        )));
    }
    Ok(FeatureVector(
        v_tar.0.iter().zip(&v_ref.0).map(|(a, b)| a - b).collect(),
    ))
}

/// Row-wise `V_tar − V_ref` over `M × D` batches; `None` leaves targets as-is.
pub fn ndf_batch<T: Real>(v_tar: &[T], v_ref: Option<&[T]>) -> Vec<T> {
    match v_ref {
        Some(r) => v_tar.iter().zip(r).map(|(&a, &b)| a - b).collect(),
        None => v_tar.to_vec(),
    }
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(z) − z_label`, evaluated without forming probabilities.
pub fn log_softmax_loss<T: Real>(logits: &[T], label: ClassIndex) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    lse - logits[label]
}

/// `M × K` logits `ndf · θᵀ (+ b)`.
pub fn logits_batch<T: Real>(ndf: &[T], m: usize, params: &ClassifierParams<T>) -> Vec<T> {
    let (k, d) = (params.k, params.d);
    let mut out = vec![T::zero(); m * k];
    if let Some(b) = &params.bias {
        for row in out.chunks_mut(k) {
            row.copy_from_slice(&b.value);
        }
    }
    // out[m,k] += ndf[m,d] · theta[k,d]^T
    T::gemm(
        m,
        d,
        k,
        T::one(),
        ndf,
        d as isize,
        1,
        &params.theta.value,
        1,
        d as isize,
        T::one(),
        &mut out,
        k as isize,
        1,
    );
    out
}

/// Per-sample losses and the gradient of `scale · Σ loss` with respect to the logits.
pub fn loss_and_dlogits<T: Real>(logits: &[T], k: usize, labels: &[ClassIndex], scale: T) -> (Vec<f64>, Vec<T>) {
    let mut losses = Vec::with_capacity(labels.len());
    let mut d = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks(k).zip(labels) {
        losses.push(log_softmax_loss(row, y).as_f64());
        let p = softmax(row);
        for (j, pj) in p.into_iter().enumerate() {
            let onehot = if j == y { T::one() } else { T::zero() };
            d.push((pj - onehot) * scale);
        }
    }
    (losses, d)
}

/// Accumulates classifier gradients and returns `d ndf` (`M × D`).
pub fn head_backward<T: Real>(params: &mut ClassifierParams<T>, ndf: &[T], dlogits: &[T], m: usize) -> Vec<T> {
    let (k, d) = (params.k, params.d);
    // dtheta[k,d] += dlogits[m,k]^T · ndf[m,d]
    T::gemm(
        k,
        m,
        d,
        T::one(),
        dlogits,
        1,
        k as isize,
        ndf,
        d as isize,
        1,
        T::one(),
        &mut params.theta.grad,
        d as isize,
        1,
    );
    if let Some(b) = params.bias.as_mut() {
        for row in dlogits.chunks(k) {
            for (g, &v) in b.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    let mut dndf = vec![T::zero(); m * d];
    matmul(m, k, d, dlogits, &params.theta.value, T::zero(), &mut dndf);
    dndf
}

/// Class probabilities for one feature vector.
pub fn classify(ndf: &FeatureVector, params: &ClassifierParams<f64>) -> Result<Vec<f64>> {
    if ndf.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classify"));
    }
    if ndf.len() != params.d {
        return Err(Error::Shape(format!("{} features for a {}-wide classifier", ndf.len(), params.d)));
    }
    Ok(softmax(&logits_batch(&ndf.0, 1, params)))
}

/// `−log p_label`, flooring a zero probability at [`PROB_FLOOR`].
pub fn ce_loss(p: &[f64], label: ClassIndex) -> f64 {
    let mut pk = p[label];
    if pk <= 0.0 {
        CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        pk = PROB_FLOOR;
    }
    -pk.ln()
}

/// Gradients of the single-sample loss through subtraction, classifier and softmax.
#[derive(Clone, Debug)]
pub struct HeadGradients {
    pub loss: f64,
    pub theta: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub v_tar: Vec<f64>,
    pub v_ref: Vec<f64>,
}

/// Loss and analytic gradients for one `(V_tar, V_ref, label)` triple, using
/// the same batch kernels as training.
pub fn sample_gradients(
    v_tar: &[f64],
    v_ref: &[f64],
    params: &ClassifierParams<f64>,
    label: ClassIndex,
) -> HeadGradients {
    let mut p = params.clone();
    p.params_mut().into_iter().for_each(|q| q.zero_grad());
    let ndf = ndf_batch(v_tar, Some(v_ref));
    let logits = logits_batch(&ndf, 1, &p);
    let (losses, dlogits) = loss_and_dlogits(&logits, p.k, &[label], 1.0);
    let dndf = head_backward(&mut p, &ndf, &dlogits, 1);
    HeadGradients {
        loss: losses[0],
        theta: p.theta.grad.clone(),
        bias: p.bias.as_ref().map(|b| b.grad.clone()),
        v_ref: dndf.iter().map(|g| -g).collect(),
        v_tar: dndf,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector(v.to_vec())
    }

    #[test]
    fn ndf_examples() {
        let a = fv(&[1.0, 2.0, 3.0]);
        assert_eq!(compute_ndf(&a, &a).unwrap(), fv(&[0.0; 3]));
        assert_eq!(compute_ndf(&a, &fv(&[0.0; 3])).unwrap(), a);
        assert_eq!(compute_ndf(&a, &fv(&[0.5, 2.0, 1.0])).unwrap(), fv(&[0.5, 0.0, 2.0]));
        assert!(compute_ndf(&a, &fv(&[1.0])).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let p = classify(&fv(&[0.3, -2.0, 5.0]), &ClassifierParams::zeros(4, 3, false)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let shifted = softmax(&[3f64.ln() + 40.0, 40.0]);
        assert!((shifted[0] - 0.75).abs() < 1e-12);
        let huge = softmax(&[1000.0, 0.0]);
        assert!(huge.iter().all(|v: &f64| v.is_finite()) && huge[1] >= 0.0);
    }

    #[test]
    fn classify_rejects_non_finite() {
        let params = ClassifierParams::zeros(2, 2, false);
        assert!(classify(&fv(&[f64::NAN, 0.0]), &params).is_err());
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&[1.0, 0.0], 0), 0.0);
        assert!((ce_loss(&[(-1f64).exp(), 1.0 - (-1f64).exp()], 0) - 1.0).abs() < 1e-15);
        assert!((ce_loss(&[1.0 / 7.0; 7], 3) - 7f64.ln()).abs() < 1e-12);
        let before = clamp_warnings();
        assert!((ce_loss(&[1.0, 0.0], 1) - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(clamp_warnings() > before);
    }

    #[test]
    fn log_space_loss_matches_probability_loss() {
        let z = [0.2, -1.3, 2.2, 0.0];
        for y in 0..4 {
            assert!((log_softmax_loss(&z, y) - ce_loss(&softmax(&z), y)).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_shifts_logits() {
        let mut r = rng::stream(1, &[]);
        let mut p = ClassifierParams::<f64>::init(3, 2, true, &mut r);
        p.bias.as_mut().unwrap().value = vec![1.0, 0.0, -1.0];
        let plain = ClassifierParams {
            bias: None,
            ..p.clone()
        };
        let x = [0.4, -0.9];
        let a = logits_batch(&x, 1, &p);
        let b = logits_batch(&x, 1, &plain);
        assert!((a[0] - b[0] - 1.0).abs() < 1e-15 && (a[2] - b[2] + 1.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ndf_is_antisymmetric(a in proptest::collection::vec(-10.0f64..10.0, 8),
                                    b in proptest::collection::vec(-10.0f64..10.0, 8)) {
                let ab = compute_ndf(&fv(&a), &fv(&b)).unwrap();
                let ba = compute_ndf(&fv(&b), &fv(&a)).unwrap();
                for (x, y) in ab.0.iter().zip(&ba.0) {
                    prop_assert_eq!(*x, -*y);
                }
            }

            #[test]
            fn loss_is_nonnegative(z in proptest::collection::vec(-30.0f64..30.0, 5), y in 0usize..5) {
                let l = log_softmax_loss(&z, y);
                prop_assert!(l >= 0.0);
                let p = softmax(&z);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
