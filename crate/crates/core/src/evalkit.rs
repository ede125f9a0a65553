//! Threshold calibration, outlier metrics and the histogram / PCA exports.
//!
//! Energies follow the "lower is more inlier" convention throughout. The
//! threshold ξ is the nearest-rank `⌈0.95·n⌉`-th smallest inlier energy and an
//! input is an inlier iff `E < ξ`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::FeatureRecord;
use crate::error::{invalid, FfsError, Result};
use crate::flow::FlowModel;
use crate::heads::HeadBundle;
use crate::numerics::pca_top2;
use crate::synthesis::OutlierBatch;

/// Fraction of inliers the threshold is calibrated to admit.
pub const TARGET_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSemantics {
    /// Lower means more inlier-like.
    Energy,
    /// Higher means more inlier-like.
    NegatedEnergy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub semantics: ScoreSemantics,
}

impl ScoreSet {
    pub fn energies(id: Vec<f64>, ood: Vec<f64>) -> Self {
        Self { id_scores: id, ood_scores: ood, semantics: ScoreSemantics::Energy }
    }

    fn as_energies(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return invalid("score lists must be non-empty");
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|v| !v.is_finite()) {
            return Err(FfsError::NonFinite("reading scores".into()));
        }
        let sign = match self.semantics {
            ScoreSemantics::Energy => 1.0,
            ScoreSemantics::NegatedEnergy => -1.0,
        };
        let conv = |v: &[f64]| v.iter().map(|s| sign * s).collect();
        Ok((conv(&self.id_scores), conv(&self.ood_scores)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub xi: f64,
    /// Set when more than one inlier energy equals ξ, so the strict rule
    /// rejects a tied block and admits fewer inliers than the rank suggests.
    pub degenerate: bool,
}

pub fn calibrate_threshold(id_energies: &[f64]) -> Result<Threshold> {
    if id_energies.is_empty() {
        return invalid("no inlier energies to calibrate on");
    }
    if id_energies.iter().any(|v| !v.is_finite()) {
        return Err(FfsError::NonFinite("calibrating the threshold".into()));
    }
    let mut sorted = id_energies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (TARGET_TPR * sorted.len() as f64).ceil() as usize;
    let xi = sorted[rank.clamp(1, sorted.len()) - 1];
    let ties = sorted.iter().filter(|&&e| e == xi).count();
    Ok(Threshold { xi, degenerate: ties > 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Inlier,
    Outlier,
}

pub fn classify(energy: f64, xi: f64) -> Decision {
    if energy < xi {
        Decision::Inlier
    } else {
        Decision::Outlier
    }
}

/// Fraction of outliers admitted at the calibrated threshold.
pub fn fpr95(scores: &ScoreSet) -> Result<f64> {
    let (id, ood) = scores.as_energies()?;
    let t = calibrate_threshold(&id)?;
    Ok(ood.iter().filter(|&&e| classify(e, t.xi) == Decision::Inlier).count() as f64 / ood.len() as f64)
}

/// Probability that a random inlier scores as more inlier-like than a random
/// outlier, ties counted one half (Mann–Whitney form, average ranks).
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    let (id, ood) = scores.as_energies()?;
    // rank by descending energy so that inliers (low energy) get high ranks
    let mut pooled: Vec<(f64, bool)> = id.iter().map(|&e| (e, true)).chain(ood.iter().map(|&e| (e, false))).collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * pooled[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (n, m) = (id.len() as f64, ood.len() as f64);
    let u = rank_sum - n * (n + 1.0) / 2.0;
    // both branches land on values whose complement is exact, so swapping
    // the lists yields exactly 1 − a
    let pairs = n * m;
    Ok(if 2.0 * u > pairs { 1.0 - (pairs - u) / pairs } else { 1.0 - (1.0 - u / pairs) })
}

/// Evaluation summary; serializes to JSON with exactly these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub inlier_accuracy: f64,
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub degenerate_threshold: bool,
}

impl Metrics {
    pub fn from_scores(scores: &ScoreSet, inlier_accuracy: f64) -> Result<Self> {
        let (id, ood) = scores.as_energies()?;
        let t = calibrate_threshold(&id)?;
        Ok(Self {
            fpr95: fpr95(scores)?,
            auroc: auroc(scores)?,
            inlier_accuracy,
            threshold: t.xi,
            n_id: id.len(),
            n_ood: ood.len(),
            degenerate_threshold: t.degenerate,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FfsError::Parse { line: e.line(), msg: e.to_string() })
    }
}

/// Argmax over all `K+1` logits (first index wins ties) against the labels of
/// the inlier-labeled records.
pub fn inlier_accuracy(bundle: &HeadBundle, records: &[FeatureRecord]) -> Result<f64> {
    let k = bundle.classes();
    let mut n = 0usize;
    let mut correct = 0usize;
    for r in records.iter().filter(|r| r.is_inlier(k)) {
        let logits = bundle.head.class_logits(&r.feature)?;
        let arg = logits.iter().enumerate().fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
        n += 1;
        correct += usize::from(arg == r.label as usize);
    }
    if n == 0 {
        return invalid("no inlier records to score accuracy on");
    }
    Ok(correct as f64 / n as f64)
}

/// Energies of inlier-labeled validation records against energies of the OOD
/// set, plus inlier accuracy on the validation records.
pub fn evaluate(bundle: &HeadBundle, val: &[FeatureRecord], ood: &[FeatureRecord]) -> Result<Metrics> {
    let k = bundle.classes();
    let id: Vec<f64> = val.iter().filter(|r| r.is_inlier(k)).map(|r| bundle.energy_of(&r.feature)).collect::<Result<_>>()?;
    let od: Vec<f64> = ood.iter().map(|r| bundle.energy_of(&r.feature)).collect::<Result<_>>()?;
    Metrics::from_scores(&ScoreSet::energies(id, od), inlier_accuracy(bundle, val)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` shared edges.
    pub edges: Vec<f64>,
    pub groups: Vec<(String, Vec<usize>)>,
}

impl Histogram {
    /// Equal-width bins over the pooled range of all groups. If every value
    /// is identical the range is widened to one unit above it.
    pub fn build(groups: &[(&str, &[f64])], bins: usize) -> Result<Self> {
        if bins == 0 {
            return invalid("bins must be at least 1");
        }
        let all = groups.iter().flat_map(|(_, v)| v.iter().copied());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in all {
            if !v.is_finite() {
                return Err(FfsError::NonFinite("binning log-likelihoods".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return invalid("nothing to bin");
        }
        if hi == lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
        let groups = groups
            .iter()
            .map(|(name, values)| {
                let mut counts = vec![0; bins];
                for v in values.iter() {
                    let b = (((v - lo) / width) as usize).min(bins - 1);
                    counts[b] += 1;
                }
                (name.to_string(), counts)
            })
            .collect();
        Ok(Self { edges, groups })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,bin_left,bin_right,count\n");
        for (name, counts) in &self.groups {
            for (i, c) in counts.iter().enumerate() {
                writeln!(out, "{name},{:?},{:?},{c}", self.edges[i], self.edges[i + 1]).expect("string write");
            }
        }
        out
    }
}

/// Log-likelihood histograms of inliers, background records and synthesized
/// outliers under the flow, written as CSV.
pub fn export_histograms(
    model: &FlowModel,
    id_features: &[Vec<f64>],
    background_features: &[Vec<f64>],
    outliers: &OutlierBatch,
    bins: usize,
    path: impl AsRef<Path>,
) -> Result<Histogram> {
    if id_features.is_empty() {
        return invalid("no inlier features to histogram");
    }
    let ll = |xs: &[Vec<f64>]| xs.iter().map(|x| model.log_prob(x)).collect::<Result<Vec<f64>>>();
    let id = ll(id_features)?;
    let bg = ll(background_features)?;
    let od = ll(&outliers.features)?;
    let hist = Histogram::build(&[("id", &id), ("background", &bg), ("synthetic_od", &od)], bins)?;
    std::fs::write(path, hist.to_csv())?;
    Ok(hist)
}

/// PCA rows `(label, pc1, pc2)`: basis fit on the inliers, outliers projected
/// into it with label −1.
pub fn pca_rows(id_records: &[FeatureRecord], outliers: &OutlierBatch) -> Result<Vec<(i32, [f64; 2])>> {
    let features: Vec<Vec<f64>> = id_records.iter().map(|r| r.feature.clone()).collect();
    let pca = pca_top2(&features)?;
    let mut rows: Vec<(i32, [f64; 2])> = id_records.iter().zip(&pca.projections).map(|(r, p)| (r.label, *p)).collect();
    for o in &outliers.features {
        if o.len() != pca.mean.len() {
            return invalid("outlier dimension differs from the inliers");
        }
        rows.push((crate::datakit::OOD_LABEL, pca.project(o)));
    }
    Ok(rows)
}

pub fn export_pca(id_records: &[FeatureRecord], outliers: &OutlierBatch, path: impl AsRef<Path>) -> Result<usize> {
    let rows = pca_rows(id_records, outliers)?;
    let mut out = String::from("label,pc1,pc2\n");
    for (label, [a, b]) in &rows {
        writeln!(out, "{label},{a:?},{b:?}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::Provenance;

    fn one_to(n: usize) -> Vec<f64> {
        (1..=n).map(|v| v as f64).collect()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(calibrate_threshold(&one_to(20)).unwrap(), Threshold { xi: 19.0, degenerate: false });
        assert_eq!(calibrate_threshold(&[3.5]).unwrap(), Threshold { xi: 3.5, degenerate: false });
        let flat = calibrate_threshold(&[2.0; 10]).unwrap();
        assert_eq!(flat, Threshold { xi: 2.0, degenerate: true });
        assert!([2.0; 10].iter().all(|&e| classify(e, flat.xi) == Decision::Outlier));
        assert!(calibrate_threshold(&[]).is_err());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(18.5, 19.0), Decision::Inlier);
        assert_eq!(classify(19.0, 19.0), Decision::Outlier);
        assert_eq!(classify(25.0, 19.0), Decision::Outlier);
    }

    #[test]
    fn fpr95_examples() {
        assert_eq!(fpr95(&ScoreSet::energies(one_to(20), vec![10.0, 25.0])).unwrap(), 0.5);
        assert_eq!(fpr95(&ScoreSet::energies(one_to(20), vec![21.0, 30.0])).unwrap(), 0.0);
        assert_eq!(fpr95(&ScoreSet::energies(one_to(20), one_to(20))).unwrap(), 0.9);
        assert!(fpr95(&ScoreSet::energies(vec![], vec![1.0])).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&ScoreSet::energies(vec![1.0, 2.0], vec![3.0, 4.0])).unwrap(), 1.0);
        assert_eq!(auroc(&ScoreSet::energies(vec![1.0, 2.0, 2.0], vec![2.0, 1.0, 2.0])).unwrap(), 0.5);
        let neg = ScoreSet { id_scores: vec![-1.0], ood_scores: vec![-3.0], semantics: ScoreSemantics::NegatedEnergy };
        assert_eq!(auroc(&neg).unwrap(), 1.0);
        assert!(auroc(&ScoreSet::energies(vec![1.0], vec![])).is_err());
    }

    #[test]
    fn metrics_json_keys_in_order() {
        let m = Metrics::from_scores(&ScoreSet::energies(one_to(20), vec![10.0, 25.0]), 1.0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec!["fpr95", "auroc", "inlier_accuracy", "threshold", "n_id", "n_ood", "degenerate_threshold"];
        expected.sort_unstable();
        assert_eq!(keys, expected);
        assert!(m.to_json().find("fpr95").unwrap() < m.to_json().find("degenerate_threshold").unwrap());
        assert_eq!(Metrics::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn histogram_conserves_counts() {
        let h = Histogram::build(&[("id", &[1.0, 2.0, 3.0]), ("background", &[]), ("synthetic_od", &[-4.0])], 7).unwrap();
        let totals: Vec<usize> = h.groups.iter().map(|(_, c)| c.iter().sum()).collect();
        assert_eq!(totals, vec![3, 0, 1]);
        assert_eq!(h.to_csv().lines().count(), 1 + 3 * 7);

        let same = Histogram::build(&[("id", &[0.5; 4])], 5).unwrap();
        assert_eq!(same.groups[0].1.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn pca_rows_project_outliers_into_inlier_basis() {
        let recs: Vec<FeatureRecord> =
            [[0.0, 0.0, 1.0], [2.0, 1.0, 0.0], [4.0, 0.0, 1.0], [1.0, 3.0, 0.5]].iter().enumerate().map(|(i, f)| FeatureRecord::new(i as i32 % 2, f.to_vec())).collect();
        let batch = OutlierBatch {
            features: vec![recs[2].feature.clone()],
            log_liks: vec![0.0],
            latents: None,
            provenance: Provenance::Rejection { k: 1, s: 1 },
        };
        let rows = pca_rows(&recs, &batch).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4].0, -1);
        assert_eq!(rows[4].1, rows[2].1);
    }
}
