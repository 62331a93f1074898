//! ZSL and GZSL evaluation by swapping in prototypes of the evaluated classes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::{cosine, is_zero};
use crate::params::ParamStore;
use crate::parallel::map_ordered;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zsl,
    Gzsl,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Zsl => "zsl",
            EvalMode::Gzsl => "gzsl",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(EvalMode::Zsl),
            "gzsl" => Ok(EvalMode::Gzsl),
            _ => Err(Error::Config(format!("unknown eval mode {s:?}"))),
        }
    }
}

/// Accuracies are per-class means in [0, 1]. ZSL fills `t1`; GZSL fills the other three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    #[serde(rename = "T1", skip_serializing_if = "Option::is_none", default)]
    pub t1: Option<f64>,
    #[serde(rename = "Acc_U", skip_serializing_if = "Option::is_none", default)]
    pub acc_u: Option<f64>,
    #[serde(rename = "Acc_S", skip_serializing_if = "Option::is_none", default)]
    pub acc_s: Option<f64>,
    #[serde(rename = "Acc_H", skip_serializing_if = "Option::is_none", default)]
    pub acc_h: Option<f64>,
    /// Global class id to top-1 accuracy; classes without test samples are absent.
    pub per_class: BTreeMap<usize, f64>,
    pub num_samples: usize,
}

/// `2·u·s / (u + s)`, and 0 when both are 0.
pub fn harmonic_mean(acc_u: f64, acc_s: f64) -> f64 {
    let sum = acc_u + acc_s;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * acc_u * acc_s / sum
    }
}

/// Row of `prototypes` with the highest cosine to `cf`; the lowest index wins ties.
pub fn predict(cf: ArrayView1<f64>, prototypes: ArrayView2<f64>) -> Result<usize> {
    if prototypes.nrows() == 0 {
        return Err(Error::Shape("no prototypes to predict from".into()));
    }
    if is_zero(cf) {
        return Err(Error::ZeroNorm("class feature".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in prototypes.rows().into_iter().enumerate() {
        let s = cosine(cf, row);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Prototypes of `classes` (in that order), class-normalized over exactly that set.
pub fn build_eval_prototypes(model: &Model, params: &ParamStore, dataset: &Dataset, classes: &[usize]) -> Result<Array2<f64>> {
    if classes.is_empty() {
        return Err(Error::Config("evaluation class set is empty".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= dataset.num_classes()) {
        return Err(Error::Config(format!("class {c} is out of range")));
    }
    model.class_prototypes(params, dataset.semantics.class_rows(classes).view())
}

/// Classes scored in `mode`: unseen only, or seen followed by unseen.
pub fn candidate_classes(dataset: &Dataset, mode: EvalMode) -> Vec<usize> {
    match mode {
        EvalMode::Zsl => dataset.unseen_classes.clone(),
        EvalMode::Gzsl => dataset.seen_classes.iter().chain(&dataset.unseen_classes).copied().collect(),
    }
}

/// Scores every relevant test sample with `classify`, which returns a position in
/// the candidate list, and aggregates per-class accuracies.
pub fn evaluate_with<F>(dataset: &Dataset, mode: EvalMode, mut classify: F) -> Result<MetricsReport>
where
    F: FnMut(&Sample, &[usize]) -> Result<usize>,
{
    let candidates = candidate_classes(dataset, mode);
    let indices = dataset.test_indices_for(&candidates);
    let mut predictions = Vec::with_capacity(indices.len());
    for &i in &indices {
        let s = &dataset.samples[i];
        let pos = classify(s, &candidates)?;
        let pred = *candidates
            .get(pos)
            .ok_or_else(|| Error::Shape(format!("prediction {pos} is out of range")))?;
        predictions.push((s.label, pred));
    }
    Ok(aggregate(dataset, mode, &predictions))
}

/// Per-class accuracies from `(label, prediction)` pairs.
pub fn aggregate(dataset: &Dataset, mode: EvalMode, predictions: &[(usize, usize)]) -> MetricsReport {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(label, pred) in predictions {
        let e = counts.entry(label).or_default();
        e.0 += (label == pred) as usize;
        e.1 += 1;
    }
    let per_class: BTreeMap<usize, f64> = counts.iter().map(|(&c, &(hit, n))| (c, hit as f64 / n as f64)).collect();
    let mean_over = |classes: &[usize]| {
        let mut accs = Vec::new();
        for c in classes {
            match per_class.get(c) {
                Some(&a) => accs.push(a),
                None => log::warn!("class {c} has no test samples; excluded from the average"),
            }
        }
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    };
    let mut report = MetricsReport {
        mode,
        t1: None,
        acc_u: None,
        acc_s: None,
        acc_h: None,
        per_class: per_class.clone(),
        num_samples: predictions.len(),
    };
    match mode {
        EvalMode::Zsl => report.t1 = Some(mean_over(&dataset.unseen_classes)),
        EvalMode::Gzsl => {
            let u = mean_over(&dataset.unseen_classes);
            let s = mean_over(&dataset.seen_classes);
            report.acc_u = Some(u);
            report.acc_s = Some(s);
            report.acc_h = Some(harmonic_mean(u, s));
        }
    }
    report
}

/// Evaluates a trained model; class features are extracted on `threads` workers.
pub fn evaluate(model: &Model, params: &ParamStore, dataset: &Dataset, mode: EvalMode, threads: usize) -> Result<MetricsReport> {
    let candidates = candidate_classes(dataset, mode);
    let prototypes = build_eval_prototypes(model, params, dataset, &candidates)?;
    let indices = dataset.test_indices_for(&candidates);
    let preds = map_ordered(&indices, threads, |&i| {
        let s = &dataset.samples[i];
        let bundle = model.extract(params, s.image.view())?;
        let pos = predict(bundle.class_feature.view(), prototypes.view())?;
        Ok::<_, Error>((s.label, candidates[pos]))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(dataset, mode, &preds))
}
