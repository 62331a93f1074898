//! Training objectives: cosine classification, attribute-prototype triplet,
//! attribute-feature contrastive and semantic readout losses.
//!
//! Every loss has a `*_grad` twin returning the analytic gradient. Hard-example
//! and peak selections are treated as constants when differentiating.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::attention::semantic_readout_backward;
use crate::backbone::{BundleGrad, FeatureBundle};
use crate::error::{Error, Result};
use crate::ops::{cosine, cosine_grads, cosine_matrix, is_zero, log_sum_exp, softmax};

/// Threshold on raw attention peaks below which attribute features are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakThreshold {
    Fixed(f64),
    /// Quantile of the raw peaks observed on the first training episode.
    WarmupQuantile(f64),
}

impl Default for PeakThreshold {
    fn default() -> Self {
        PeakThreshold::WarmupQuantile(0.9)
    }
}

impl FromStr for PeakThreshold {
    type Err = Error;

    /// `"9"` is a fixed threshold; `"quantile:0.9"` a warm-up quantile.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid peak threshold {s:?}"));
        match s.strip_prefix("quantile:") {
            Some(q) => Ok(PeakThreshold::WarmupQuantile(q.parse().map_err(|_| bad())?)),
            None => Ok(PeakThreshold::Fixed(s.parse().map_err(|_| bad())?)),
        }
    }
}

impl fmt::Display for PeakThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeakThreshold::Fixed(t) => write!(f, "{t}"),
            PeakThreshold::WarmupQuantile(q) => write!(f, "quantile:{q}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub t_hard: f64,
    pub peak_threshold: PeakThreshold,
    pub lambda_attp: f64,
    pub lambda_attf: f64,
    pub lambda_sem: f64,
    /// `false` uses every same-attribute positive and different-attribute negative.
    pub hard_selection: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 25.0,
            beta: 0.5,
            tau: 0.4,
            t_hard: 0.8,
            peak_threshold: PeakThreshold::default(),
            lambda_attp: 0.1,
            lambda_attf: 1.0,
            lambda_sem: 1.0,
            hard_selection: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if !(self.t_hard > 0.0 && self.t_hard < 1.0) {
            return fail("t_hard must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail("beta must be non-negative");
        }
        for (n, l) in [("lambda_attp", self.lambda_attp), ("lambda_attf", self.lambda_attf), ("lambda_sem", self.lambda_sem)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{n} must be non-negative")));
            }
        }
        match self.peak_threshold {
            PeakThreshold::Fixed(t) if !t.is_finite() => fail("peak threshold must be finite"),
            PeakThreshold::WarmupQuantile(q) if !(0.0..=1.0).contains(&q) => fail("peak quantile must lie in [0, 1]"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub attp: f64,
    pub attf: f64,
    pub sem: f64,
}

impl LossParts {
    pub fn all_finite(&self) -> bool {
        [self.cls, self.attp, self.attf, self.sem].iter().all(|v| v.is_finite())
    }
}

/// `cls + λ_attp·attp + λ_attf·attf + λ_sem·sem`.
pub fn total_loss(parts: &LossParts, config: &LossConfig) -> f64 {
    parts.cls + config.lambda_attp * parts.attp + config.lambda_attf * parts.attf + config.lambda_sem * parts.sem
}

fn check_prototypes(p: ArrayView2<f64>, what: &str) -> Result<()> {
    match p.rows().into_iter().position(|r| is_zero(r)) {
        Some(i) => Err(Error::ZeroNorm(format!("{what} row {i} is the zero vector"))),
        None => Ok(()),
    }
}

/// Softmax over classes of `alpha · cos(cf, cp_i)`.
pub fn class_probabilities(cf: ArrayView1<f64>, cp: ArrayView2<f64>, alpha: f64) -> Result<Array1<f64>> {
    if is_zero(cf) {
        return Err(Error::ZeroNorm("class feature is the zero vector".into()));
    }
    check_prototypes(cp, "class prototype")?;
    let logits: Array1<f64> = cp.rows().into_iter().map(|p| alpha * cosine(cf, p)).collect();
    Ok(softmax(logits.view()))
}

/// `-log p_label` for one image.
pub fn classification_loss(cf: ArrayView1<f64>, cp: ArrayView2<f64>, label: usize, alpha: f64) -> Result<f64> {
    Ok(classification_loss_grad(cf, cp, label, alpha)?.0)
}

/// Returns `(loss, d_cf, d_cp)`.
pub fn classification_loss_grad(
    cf: ArrayView1<f64>,
    cp: ArrayView2<f64>,
    label: usize,
    alpha: f64,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    if label >= cp.nrows() {
        return Err(Error::Shape(format!("label {label} out of range for {} prototypes", cp.nrows())));
    }
    if is_zero(cf) {
        return Err(Error::ZeroNorm("class feature is the zero vector".into()));
    }
    check_prototypes(cp, "class prototype")?;
    let logits: Array1<f64> = cp.rows().into_iter().map(|p| alpha * cosine(cf, p)).collect();
    let loss = log_sum_exp(logits.iter().copied()) - logits[label];
    let probs = softmax(logits.view());
    let mut d_cf = Array1::zeros(cf.len());
    let mut d_cp = Array2::zeros(cp.raw_dim());
    for (i, p) in cp.rows().into_iter().enumerate() {
        let g = alpha * (probs[i] - if i == label { 1.0 } else { 0.0 });
        let (du, dv) = cosine_grads(cf, p);
        d_cf.scaled_add(g, &du);
        d_cp.row_mut(i).scaled_add(g, &dv);
    }
    Ok((loss, d_cf, d_cp))
}

/// An attribute feature that passed peak filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct EligibleFeature {
    pub feature: Array1<f64>,
    pub attribute: usize,
    pub image: usize,
    pub peak: f64,
}

/// Keeps `(image, attribute)` pairs whose raw attention peak is `>= threshold`,
/// in image-major then attribute order.
pub fn filter_by_peak(
    attention: &[ArrayView2<f64>],
    attribute_features: &[ArrayView2<f64>],
    threshold: f64,
) -> Vec<EligibleFeature> {
    let mut out = Vec::new();
    for (image, (am, af)) in attention.iter().zip(attribute_features).enumerate() {
        for (j, col) in am.columns().into_iter().enumerate() {
            let peak = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if peak >= threshold {
                out.push(EligibleFeature {
                    feature: af.row(j).to_owned(),
                    attribute: j,
                    image,
                    peak,
                });
            }
        }
    }
    out
}

fn cosine_distance_row(f: ArrayView1<f64>, ap: ArrayView2<f64>) -> Vec<f64> {
    ap.rows().into_iter().map(|p| 1.0 - cosine(f, p)).collect()
}

/// Index and value of the smallest distance to a prototype other than `own` (lowest index on ties).
fn nearest_other(d: &[f64], own: usize) -> Option<(usize, f64)> {
    d.iter()
        .enumerate()
        .filter(|(j, _)| *j != own)
        .fold(None, |best, (j, &v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((j, v)),
        })
}

/// `Σ relu(d_own − β·min_{j'≠j} d_{j'})` with cosine distance `d = 1 − cos`.
/// With a single attribute there is no competitor and the term is `relu(d_own)`.
pub fn attribute_prototype_loss(eligible: &[EligibleFeature], ap: ArrayView2<f64>, beta: f64) -> Result<f64> {
    Ok(attribute_prototype_loss_grad(eligible, ap, beta)?.0)
}

/// Returns `(loss, d_features per eligible entry, d_ap)`.
pub fn attribute_prototype_loss_grad(
    eligible: &[EligibleFeature],
    ap: ArrayView2<f64>,
    beta: f64,
) -> Result<(f64, Vec<Array1<f64>>, Array2<f64>)> {
    check_prototypes(ap, "attribute prototype")?;
    let mut loss = 0.0;
    let mut d_ap = Array2::zeros(ap.raw_dim());
    let mut d_feat = Vec::with_capacity(eligible.len());
    for e in eligible {
        let j = e.attribute;
        if j >= ap.nrows() {
            return Err(Error::Shape(format!("attribute {j} out of range for {} prototypes", ap.nrows())));
        }
        let d = cosine_distance_row(e.feature.view(), ap);
        let other = nearest_other(&d, j);
        let term = d[j] - beta * other.map_or(0.0, |(_, v)| v);
        let mut g = Array1::zeros(e.feature.len());
        if term > 0.0 {
            loss += term;
            let (df, dp) = cosine_grads(e.feature.view(), ap.row(j));
            g -= &df;
            d_ap.row_mut(j).scaled_add(-1.0, &dp);
            if let Some((o, _)) = other {
                let (df, dp) = cosine_grads(e.feature.view(), ap.row(o));
                g.scaled_add(beta, &df);
                d_ap.row_mut(o).scaled_add(beta, &dp);
            }
        }
        d_feat.push(g);
    }
    Ok((loss, d_feat, d_ap))
}

/// Hard positives and negatives of `anchor`, as indices into `eligible`.
pub fn mine_hard_examples(
    eligible: &[EligibleFeature],
    anchor: usize,
    t_hard: f64,
    hard_selection: bool,
) -> (Vec<usize>, Vec<usize>) {
    let a = &eligible[anchor];
    let cos: Vec<f64> = eligible.iter().map(|e| cosine(a.feature.view(), e.feature.view())).collect();
    mine_from_row(eligible, anchor, &cos, t_hard, hard_selection)
}

fn mine_from_row(
    eligible: &[EligibleFeature],
    anchor: usize,
    cos: &[f64],
    t_hard: f64,
    hard_selection: bool,
) -> (Vec<usize>, Vec<usize>) {
    let attr = eligible[anchor].attribute;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, e) in eligible.iter().enumerate() {
        if i == anchor {
            continue;
        }
        if e.attribute == attr {
            if !hard_selection || cos[i] < t_hard {
                pos.push(i);
            }
        } else if !hard_selection || cos[i] > 1.0 - t_hard {
            neg.push(i);
        }
    }
    (pos, neg)
}

/// Mean over anchors with at least one hard positive of
/// `−log(Σ_P e^{c/τ} / (Σ_P e^{c/τ} + Σ_N e^{c/τ}))`; zero when no anchor qualifies.
pub fn attribute_feature_loss(eligible: &[EligibleFeature], t_hard: f64, tau: f64, hard_selection: bool) -> f64 {
    attribute_feature_loss_grad(eligible, t_hard, tau, hard_selection).0
}

/// Returns `(loss, d_features per eligible entry)`.
pub fn attribute_feature_loss_grad(
    eligible: &[EligibleFeature],
    t_hard: f64,
    tau: f64,
    hard_selection: bool,
) -> (f64, Vec<Array1<f64>>) {
    let n = eligible.len();
    let dim = eligible.first().map_or(0, |e| e.feature.len());
    let mut d_feat = vec![Array1::zeros(dim); n];
    if n == 0 {
        return (0.0, d_feat);
    }
    let mut feats = Array2::zeros((n, dim));
    for (i, e) in eligible.iter().enumerate() {
        feats.row_mut(i).assign(&e.feature);
    }
    let cos = cosine_matrix(feats.view(), feats.view());
    // (anchor, other, d loss / d cos) triples, scaled by the anchor count afterwards.
    let mut terms: Vec<(usize, usize, f64)> = Vec::new();
    let mut total = 0.0;
    let mut anchors = 0usize;
    for a in 0..n {
        let row = cos.row(a);
        let (pos, neg) = mine_from_row(eligible, a, row.as_slice().expect("contiguous"), t_hard, hard_selection);
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let lp = log_sum_exp(pos.iter().map(|&u| row[u] / tau));
        let lz = log_sum_exp(pos.iter().chain(&neg).map(|&u| row[u] / tau));
        total += lz - lp;
        for &u in &pos {
            terms.push((a, u, ((row[u] / tau - lz).exp() - (row[u] / tau - lp).exp()) / tau));
        }
        for &v in &neg {
            terms.push((a, v, (row[v] / tau - lz).exp() / tau));
        }
    }
    if anchors == 0 {
        return (0.0, d_feat);
    }
    let scale = 1.0 / anchors as f64;
    for (a, o, g) in terms {
        let (da, dob) = cosine_grads(feats.row(a), feats.row(o));
        d_feat[a].scaled_add(g * scale, &da);
        d_feat[o].scaled_add(g * scale, &dob);
    }
    (total * scale, d_feat)
}

/// `‖cs_e − cs_g‖²`.
pub fn semantic_loss(cs_e: ArrayView1<f64>, cs_g: ArrayView1<f64>) -> Result<f64> {
    if cs_e.len() != cs_g.len() {
        return Err(Error::Shape(format!("readout length {} vs target length {}", cs_e.len(), cs_g.len())));
    }
    Ok(cs_e.iter().zip(cs_g).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Inputs of the batch objective besides the per-image bundles.
pub struct BatchTargets<'a> {
    /// Row `i` of `class_prototypes` is the class of label `i`.
    pub labels: &'a [usize],
    pub class_prototypes: ArrayView2<'a, f64>,
    pub attribute_prototypes: ArrayView2<'a, f64>,
    /// Readout target of each image, `B × K`.
    pub readout_targets: ArrayView2<'a, f64>,
}

#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub bundles: Vec<BundleGrad>,
    pub class_prototypes: Array2<f64>,
    pub attribute_prototypes: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub parts: LossParts,
    pub total: f64,
    pub num_eligible: usize,
    pub grads: BatchGrads,
}

/// Full weighted objective over one batch and its gradients w.r.t. the bundles and prototypes.
pub fn batch_objective(
    bundles: &[FeatureBundle],
    targets: &BatchTargets<'_>,
    config: &LossConfig,
    peak_threshold: f64,
) -> Result<BatchLoss> {
    let b = bundles.len();
    if b == 0 || targets.labels.len() != b || targets.readout_targets.nrows() != b {
        return Err(Error::Shape("batch, labels and readout targets disagree in size".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut parts = LossParts::default();
    let mut grads: Vec<BundleGrad> = bundles.iter().map(BundleGrad::zeros).collect();
    let mut d_cp = Array2::zeros(targets.class_prototypes.raw_dim());
    let mut d_ap = Array2::zeros(targets.attribute_prototypes.raw_dim());

    for (i, bundle) in bundles.iter().enumerate() {
        let (l, d_cf, d_cpi) = classification_loss_grad(
            bundle.class_feature.view(),
            targets.class_prototypes,
            targets.labels[i],
            config.alpha,
        )?;
        parts.cls += l * inv_b;
        grads[i].class_feature.scaled_add(inv_b, &d_cf);
        d_cp.scaled_add(inv_b, &d_cpi);

        let cs_e = crate::backbone::attention::readout_from_weights(bundle.attention_weights.view());
        let target = targets.readout_targets.row(i);
        parts.sem += semantic_loss(cs_e.view(), target)? * inv_b;
        if config.lambda_sem != 0.0 {
            let d_cs = (&cs_e - &target) * (2.0 * inv_b * config.lambda_sem);
            grads[i].attention += &semantic_readout_backward(bundle.attention_weights.view(), d_cs.view());
        }
    }

    let ams: Vec<_> = bundles.iter().map(|x| x.attention.view()).collect();
    let afs: Vec<_> = bundles.iter().map(|x| x.attribute_features.view()).collect();
    let eligible = filter_by_peak(&ams, &afs, peak_threshold);

    let (attp, d_attp, d_ap_attp) = attribute_prototype_loss_grad(&eligible, targets.attribute_prototypes, config.beta)?;
    parts.attp = attp;
    let (attf, d_attf) = attribute_feature_loss_grad(&eligible, config.t_hard, config.tau, config.hard_selection);
    parts.attf = attf;
    if config.lambda_attp != 0.0 {
        d_ap.scaled_add(config.lambda_attp, &d_ap_attp);
    }
    for (k, e) in eligible.iter().enumerate() {
        let mut row = grads[e.image].attribute_features.row_mut(e.attribute);
        if config.lambda_attp != 0.0 {
            row.scaled_add(config.lambda_attp, &d_attp[k]);
        }
        if config.lambda_attf != 0.0 {
            row.scaled_add(config.lambda_attf, &d_attf[k]);
        }
    }
    let total = total_loss(&parts, config);
    Ok(BatchLoss {
        parts,
        total,
        num_eligible: eligible.len(),
        grads: BatchGrads {
            bundles: grads,
            class_prototypes: d_cp,
            attribute_prototypes: d_ap,
        },
    })
}

/// Raw attention peaks of every `(image, attribute)` pair.
pub fn all_peaks(bundles: &[FeatureBundle]) -> Vec<f64> {
    bundles
        .iter()
        .flat_map(|b| crate::backbone::attention::raw_peaks(b.attention.view()).to_vec())
        .collect()
}

/// Per-image attention readouts stacked into `B × K`.
pub fn readouts(bundles: &[FeatureBundle]) -> Array2<f64> {
    let k = bundles.first().map_or(0, |b| b.attention.ncols());
    let mut out = Array2::zeros((bundles.len(), k));
    for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(bundles) {
        row.assign(&crate::backbone::attention::readout_from_weights(b.attention_weights.view()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    fn eligible_set(n: usize, k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<EligibleFeature> {
        (0..n)
            .map(|i| EligibleFeature {
                feature: randn(1, dim, rng).row(0).to_owned(),
                attribute: rng.gen_range(0..k),
                image: i,
                peak: 0.0,
            })
            .collect()
    }

    /// Feature with prescribed cosine `c` to `e0` in the (e0, e1) plane.
    fn at_cos(c: f64) -> Array1<f64> {
        array![c, (1.0 - c * c).sqrt(), 0.0]
    }

    #[test]
    fn classification_loss_examples() {
        let cf = array![1.0, 0.0];
        let sym2 = array![[0.0, 1.0], [0.0, -1.0]];
        assert!((classification_loss(cf.view(), sym2.view(), 0, 7.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let cf3 = array![0.0, 0.0, 1.0];
        let sym3 = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];
        assert!((classification_loss(cf3.view(), sym3.view(), 2, 25.0).unwrap() - 3f64.ln()).abs() < 1e-12);
        // cosines (0.9, 0.1): loss = log(1 + e^{-20}).
        let cf = array![1.0, 0.0, 0.0];
        let cp = Array2::from_shape_vec((2, 3), [at_cos(0.9).to_vec(), at_cos(0.1).to_vec()].concat()).unwrap();
        let l = classification_loss(cf.view(), cp.view(), 0, 25.0).unwrap();
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn zero_vectors_are_rejected() {
        let cp = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            classification_loss(array![0.0, 0.0].view(), cp.view(), 0, 1.0),
            Err(Error::ZeroNorm(_))
        ));
        let zp = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(classification_loss(array![1.0, 0.0].view(), zp.view(), 0, 1.0).is_err());
        assert!(attribute_prototype_loss(&[], zp.view(), 0.5).is_err());
    }

    #[test]
    fn peak_filter_examples() {
        let am = array![[10.2, 8.5, 9.0], [1.0, 0.0, -3.0]];
        let af = Array2::<f64>::ones((3, 2));
        let kept = filter_by_peak(&[am.view()], &[af.view()], 9.0);
        assert_eq!(kept.iter().map(|e| e.attribute).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(kept[1].peak, 9.0);
        let zeros = Array2::<f64>::zeros((4, 3));
        assert!(filter_by_peak(&[zeros.view()], &[af.view()], 9.0).is_empty());
    }

    fn one(feature: Array1<f64>, attribute: usize) -> EligibleFeature {
        EligibleFeature {
            feature,
            attribute,
            image: 0,
            peak: 0.0,
        }
    }

    #[test]
    fn attribute_prototype_loss_examples() {
        // Prototypes at cosines 1.0 (own) and 0.5 (other): d_own 0, d_other 0.5.
        let ap = Array2::from_shape_vec((2, 3), [at_cos(1.0).to_vec(), at_cos(0.5).to_vec()].concat()).unwrap();
        let f = array![1.0, 0.0, 0.0];
        assert_eq!(attribute_prototype_loss(&[one(f.clone(), 0)], ap.view(), 0.5).unwrap(), 0.0);
        // d_own 0.6, d_other 0.4 -> 0.6 - 0.2.
        let ap = Array2::from_shape_vec((2, 3), [at_cos(0.4).to_vec(), at_cos(0.6).to_vec()].concat()).unwrap();
        let l = attribute_prototype_loss(&[one(f, 0)], ap.view(), 0.5).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
        assert_eq!(attribute_prototype_loss(&[], ap.view(), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn mining_examples() {
        let set = vec![
            one(at_cos(1.0), 0),
            one(at_cos(0.9), 0),
            one(at_cos(0.7), 0),
            one(at_cos(0.3), 1),
            one(at_cos(0.15), 2),
        ];
        let (p, n) = mine_hard_examples(&set, 0, 0.8, true);
        assert_eq!(p, vec![2]);
        assert_eq!(n, vec![3]);
        let (p, n) = mine_hard_examples(&set, 0, 0.8, false);
        assert_eq!(p, vec![1, 2]);
        assert_eq!(n, vec![3, 4]);
    }

    #[test]
    fn attribute_feature_loss_examples() {
        // Anchor 0 has one positive and one negative, both at cosine 0.5: term log 2.
        // Anchor 1 sees positive 0 at 0.5 and negative 2 at 0.25; anchor 2 has no positive.
        let set = vec![
            one(array![1.0, 0.0, 0.0], 0),
            one(at_cos(0.5), 0),
            one(array![0.5, 0.0, 0.75f64.sqrt()], 1),
        ];
        let l = attribute_feature_loss(&set, 0.8, 0.5, true);
        let anchor1 = (1.0 + (-0.5f64).exp()).ln();
        assert!((l - (2f64.ln() + anchor1) / 2.0).abs() < 1e-12);
        let pos_only = vec![one(at_cos(1.0), 0), one(at_cos(0.5), 0)];
        assert_eq!(attribute_feature_loss(&pos_only, 0.8, 0.4, true), 0.0);
    }

    #[test]
    fn semantic_loss_examples() {
        assert_eq!(semantic_loss(array![0.5, 0.5].view(), array![0.0, 0.0].view()).unwrap(), 0.5);
        assert_eq!(semantic_loss(array![0.2, 0.7].view(), array![0.2, 0.7].view()).unwrap(), 0.0);
        assert!(semantic_loss(array![0.2].view(), array![0.2, 0.7].view()).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let c = LossConfig::default();
        let p = LossParts { cls: 1.0, attp: 1.0, attf: 1.0, sem: 1.0 };
        assert!((total_loss(&p, &c) - 3.1).abs() < 1e-12);
        let p = LossParts { cls: 0.5, attp: 2.0, attf: 0.0, sem: 0.25 };
        assert!((total_loss(&p, &c) - 0.95).abs() < 1e-12);
        let zero = LossConfig { lambda_attp: 0.0, lambda_attf: 0.0, lambda_sem: 0.0, ..c };
        assert_eq!(total_loss(&p, &zero), 0.5);
    }

    #[test]
    fn peak_threshold_parsing() {
        assert_eq!("9".parse::<PeakThreshold>().unwrap(), PeakThreshold::Fixed(9.0));
        assert_eq!("quantile:0.9".parse::<PeakThreshold>().unwrap(), PeakThreshold::WarmupQuantile(0.9));
        assert!("q".parse::<PeakThreshold>().is_err());
        let c = LossConfig { peak_threshold: PeakThreshold::WarmupQuantile(1.5), ..LossConfig::default() };
        assert!(c.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.9), 9.0);
    }

    fn fd_check<F: Fn(&[Array1<f64>]) -> f64>(f: F, x: &[Array1<f64>], g: &[Array1<f64>]) {
        let h = 1e-5;
        for i in 0..x.len() {
            for k in 0..x[i].len() {
                let mut p = x.to_vec();
                p[i][k] += h;
                let mut m = x.to_vec();
                m[i][k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let an = g[i][k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "[{i}][{k}] analytic {an} numeric {fd}");
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = eligible_set(12, 3, 4, &mut rng);
        let feats: Vec<Array1<f64>> = set.iter().map(|e| e.feature.clone()).collect();
        let with = |fs: &[Array1<f64>]| -> Vec<EligibleFeature> {
            set.iter().zip(fs).map(|(e, f)| EligibleFeature { feature: f.clone(), ..e.clone() }).collect()
        };
        for hs in [true, false] {
            let (_, g) = attribute_feature_loss_grad(&set, 0.8, 0.4, hs);
            fd_check(|fs| attribute_feature_loss(&with(fs), 0.8, 0.4, hs), &feats, &g);
        }
        let ap = randn(3, 4, &mut rng);
        let (_, g, d_ap) = attribute_prototype_loss_grad(&set, ap.view(), 0.5).unwrap();
        fd_check(|fs| attribute_prototype_loss(&with(fs), ap.view(), 0.5).unwrap(), &feats, &g);
        let rows: Vec<Array1<f64>> = ap.rows().into_iter().map(|r| r.to_owned()).collect();
        let d_rows: Vec<Array1<f64>> = d_ap.rows().into_iter().map(|r| r.to_owned()).collect();
        let stack = |rs: &[Array1<f64>]| Array2::from_shape_fn((3, 4), |(i, j)| rs[i][j]);
        fd_check(|rs| attribute_prototype_loss(&set, stack(rs).view(), 0.5).unwrap(), &rows, &d_rows);

        let cf = randn(1, 4, &mut rng).row(0).to_owned();
        let cp = randn(5, 4, &mut rng);
        let (_, d_cf, d_cp) = classification_loss_grad(cf.view(), cp.view(), 3, 25.0).unwrap();
        fd_check(|x| classification_loss(x[0].view(), cp.view(), 3, 25.0).unwrap(), &[cf.clone()], &[d_cf]);
        let rows: Vec<Array1<f64>> = cp.rows().into_iter().map(|r| r.to_owned()).collect();
        let d_rows: Vec<Array1<f64>> = d_cp.rows().into_iter().map(|r| r.to_owned()).collect();
        let stack5 = |rs: &[Array1<f64>]| Array2::from_shape_fn((5, 4), |(i, j)| rs[i][j]);
        fd_check(|rs| classification_loss(cf.view(), stack5(rs).view(), 3, 25.0).unwrap(), &rows, &d_rows);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn class_probabilities_form_a_simplex(m in 1usize..8, alpha in 0.1f64..50.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cf = randn(1, 5, &mut rng).row(0).to_owned();
            let cp = randn(m, 5, &mut rng);
            let p = class_probabilities(cf.view(), cp.view(), alpha).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-7);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let l = classification_loss(cf.view(), cp.view(), seed as usize % m, alpha).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn argmax_is_invariant_to_alpha(a1 in 0.01f64..100.0, a2 in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cf = randn(1, 4, &mut rng).row(0).to_owned();
            let cp = randn(6, 4, &mut rng);
            let p1 = class_probabilities(cf.view(), cp.view(), a1).unwrap();
            let p2 = class_probabilities(cf.view(), cp.view(), a2).unwrap();
            let am = |p: &Array1<f64>| crate::backbone::attention::argmax(p.view());
            prop_assert_eq!(am(&p1), am(&p2));
        }

        #[test]
        fn attribute_prototype_loss_is_non_negative(n in 0usize..20, beta in 0.0f64..2.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = eligible_set(n, 4, 3, &mut rng);
            let ap = randn(4, 3, &mut rng);
            prop_assert!(attribute_prototype_loss(&set, ap.view(), beta).unwrap() >= 0.0);
        }

        #[test]
        fn attribute_feature_loss_is_permutation_invariant(n in 0usize..25, hs in any::<bool>(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = eligible_set(n, 3, 4, &mut rng);
            let l = attribute_feature_loss(&set, 0.8, 0.4, hs);
            prop_assert!(l >= 0.0);
            let mut shuffled = set.clone();
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
            let l2 = attribute_feature_loss(&shuffled, 0.8, 0.4, hs);
            prop_assert!((l - l2).abs() < 1e-9 * l.abs().max(1.0));
        }
    }
}
