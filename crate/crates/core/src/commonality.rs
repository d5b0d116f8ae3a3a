//! The three base-to-novel distillers.
//!
//! * Recognition: scaled-cosine similarities of a base proposal to every
//!   novel class become a soft label, distilled into the classifier through
//!   a KL loss.
//! * Localization: the same similarity construction in the loc feature
//!   space becomes aggregation weights over the per-class box regressors,
//!   distilled through a weighted smooth-L1 loss.
//! * Distribution: a novel class keeps its own mean but borrows the
//!   averaged variance of its nearest base classes; features sampled from
//!   the calibrated Gaussian train the classifier with cross-entropy.
//!
//! Similarity weights and sampled features are supervision constants: no
//! gradient flows through them, only through the head outputs they score.
//! Every loss returns its analytic gradient with respect to those outputs.

use thiserror::Error;

use crate::memory_bank::{BankError, ClassId, ClassRole, FeatureSpace, MemoryBank, PrototypeSet};
use crate::numerics::{
    cosine, cross_entropy_from_logits, gaussian_sample, kl_divergence, smooth_l1, smooth_l1_grad,
    softmax, FeatureVector, NumericsError, RngState,
};

/// Normalized commonality weights over `C` foreground classes plus a final
/// background entry that is exactly 0 for foreground proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution {
    pub weights: Vec<f64>,
    pub space: FeatureSpace,
}

impl SimilarityDistribution {
    /// Foreground entries (everything but the trailing background weight).
    pub fn foreground(&self) -> &[f64] {
        &self.weights[..self.weights.len() - 1]
    }
}

/// Variance-calibrated Gaussian for one novel class: its own prototype as
/// mean, the averaged variance of the `source_classes` as spread.
#[derive(Debug, Clone)]
pub struct CalibratedGaussian {
    pub class_id: ClassId,
    pub mean: FeatureVector,
    pub calibrated_var: FeatureVector,
    pub source_classes: Vec<ClassId>,
}

/// A scalar loss plus its gradient with respect to the head outputs it
/// supervises. The gradient layout is documented per operation.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CommonalityError {
    #[error("class {0} is not a base class")]
    NotBaseClass(ClassId),
    #[error("empty sample set")]
    EmptySampleSet,
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Soft similarity distribution of a base-class proposal feature `v` against
/// the prototypes in `protos`.
///
/// Scores: `alpha * cos(v, proto)` for every novel class and for the ground
/// truth class itself; every other base class is pinned to `-alpha` so all
/// capacity goes to base-novel commonality. The scores are softmax-normalized
/// over the foreground classes and a 0 background weight is appended.
pub fn soft_labels(
    v: &[f64],
    gt: ClassId,
    protos: &PrototypeSet,
    alpha: f64,
) -> Result<SimilarityDistribution, CommonalityError> {
    if protos.role(gt)? != ClassRole::Base {
        return Err(CommonalityError::NotBaseClass(gt));
    }
    let n = protos.n_classes();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let c = ClassId(i);
        let score = if c == gt || protos.role(c)? == ClassRole::Novel {
            alpha * cosine(v, protos.get(c)?)?
        } else {
            -alpha
        };
        scores.push(score);
    }
    let mut weights = softmax(&scores)?;
    weights.push(0.0);
    Ok(SimilarityDistribution {
        weights,
        space: protos.space(),
    })
}

/// Recognition-related commonality of `v_r` (a cls-space feature of a base
/// proposal) as a soft label over all classes.
pub fn recognition_soft_labels(
    v_r: &[f64],
    gt: ClassId,
    bank: &MemoryBank,
    alpha: f64,
) -> Result<SimilarityDistribution, CommonalityError> {
    soft_labels(
        v_r,
        gt,
        &PrototypeSet::from_bank(bank, FeatureSpace::Cls),
        alpha,
    )
}

/// Localization-related commonality: identical construction to
/// [`recognition_soft_labels`] but in the loc feature space.
pub fn localization_weights(
    v_r: &[f64],
    gt: ClassId,
    bank: &MemoryBank,
    alpha: f64,
) -> Result<SimilarityDistribution, CommonalityError> {
    soft_labels(
        v_r,
        gt,
        &PrototypeSet::from_bank(bank, FeatureSpace::Loc),
        alpha,
    )
}

/// `KL(q || softmax(logits))` with gradient `softmax(logits) - q` w.r.t. the
/// logits (the `q ln q` entropy term is constant in the logits).
pub fn kl_distill_loss(
    q: &SimilarityDistribution,
    logits: &[f64],
) -> Result<LossValue, CommonalityError> {
    let p = softmax(logits)?;
    let value = kl_divergence(&q.weights, &p)?;
    let gradient = p.iter().zip(&q.weights).map(|(pc, qc)| pc - qc).collect();
    Ok(LossValue { value, gradient })
}

/// Similarity-weighted smooth-L1 over all per-class regressors:
/// `sum_c q_c sum_i smooth_l1(t_i^c - u_i)`.
///
/// Gradient layout: row-major `C x 4`, entry `[c*4 + i] = q_c * sl1'(t_i^c - u_i)`.
/// The weights are constants; they receive no gradient.
pub fn loc_distill_loss(
    q: &SimilarityDistribution,
    preds: &[[f64; 4]],
    target: &[f64; 4],
) -> Result<LossValue, CommonalityError> {
    let fg = q.foreground();
    if fg.len() != preds.len() {
        return Err(CommonalityError::Numerics(NumericsError::DimensionMismatch {
            left: fg.len(),
            right: preds.len(),
        }));
    }
    let mut value = 0.0;
    let mut gradient = vec![0.0; preds.len() * 4];
    for (c, (&qc, row)) in fg.iter().zip(preds).enumerate() {
        for i in 0..4 {
            let diff = row[i] - target[i];
            value += qc * smooth_l1(diff);
            gradient[c * 4 + i] = qc * smooth_l1_grad(diff);
        }
    }
    Ok(LossValue { value, gradient })
}

/// Variance calibration against precomputed cls-space prototypes.
///
/// `var_of` supplies the per-dimension variance of a base class; the trainer
/// passes a memoized lookup so one iteration never recomputes a variance.
pub fn calibrate_from<F>(
    protos: &PrototypeSet,
    mut var_of: F,
    c: ClassId,
    k: usize,
) -> Result<CalibratedGaussian, CommonalityError>
where
    F: FnMut(ClassId) -> Result<FeatureVector, BankError>,
{
    let source_classes = protos.top_k_closest_base(c, k)?;
    let mean = protos.get(c)?.clone();
    let mut calibrated_var = vec![0.0; mean.len()];
    for &base in &source_classes {
        let var = var_of(base)?;
        for (acc, v) in calibrated_var.iter_mut().zip(&var) {
            *acc += v;
        }
    }
    for v in &mut calibrated_var {
        *v /= k as f64;
    }
    Ok(CalibratedGaussian {
        class_id: c,
        mean,
        calibrated_var,
        source_classes,
    })
}

/// Calibrated Gaussian for novel class `c`: own prototype as mean, the mean
/// variance of the top-`k` closest base classes as variance.
pub fn calibrate_variance(
    bank: &MemoryBank,
    c: ClassId,
    k: usize,
) -> Result<CalibratedGaussian, CommonalityError> {
    let protos = PrototypeSet::from_bank(bank, FeatureSpace::Cls);
    calibrate_from(&protos, |b| bank.variance(b, FeatureSpace::Cls), c, k)
}

/// `n` labeled draws from a calibrated Gaussian.
pub fn sample_calibrated(
    g: &CalibratedGaussian,
    n: usize,
    rng: &mut RngState,
) -> Result<Vec<(FeatureVector, ClassId)>, CommonalityError> {
    (0..n)
        .map(|_| {
            let v = gaussian_sample(&g.mean, &g.calibrated_var, rng)?;
            Ok((v, g.class_id))
        })
        .collect()
}

/// Mean cross-entropy of the classifier on sampled features.
///
/// Gradient layout: per-sample blocks of `C+1` logit gradients, each already
/// scaled by `1/n` so they are gradients of the mean; block `j` is
/// `(softmax(logits_j) - onehot(label_j)) / n`.
pub fn dist_distill_loss<F>(
    samples: &[(FeatureVector, ClassId)],
    mut classifier_logits: F,
) -> Result<LossValue, CommonalityError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if samples.is_empty() {
        return Err(CommonalityError::EmptySampleSet);
    }
    let n = samples.len() as f64;
    let mut value = 0.0;
    let mut gradient = Vec::new();
    for (v, label) in samples {
        let logits = classifier_logits(v);
        let (ce, grad) = cross_entropy_from_logits(&logits, label.0)?;
        value += ce / n;
        gradient.extend(grad.into_iter().map(|g| g / n));
    }
    Ok(LossValue { value, gradient })
}
