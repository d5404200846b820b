//! Evaluation quantities: grouped accuracy, MCC, NMI, cluster purity,
//! head/tail separation, binned confusion and the oracle separation probe.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ShotGroup;
use crate::error::{DlsaError, Result};

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DlsaError::contract(format!("{op}: lengths differ ({a} vs {b})")));
    }
    Ok(())
}

/// Accuracy overall and per shot group; `None` marks an empty group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupedAccuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// `groups[c]` is the shot group of class `c`.
pub fn grouped_accuracy(preds: &[usize], labels: &[usize], groups: &[ShotGroup]) -> Result<GroupedAccuracy> {
    same_len("grouped_accuracy", preds.len(), labels.len())?;
    if labels.is_empty() {
        return Err(DlsaError::contract("grouped_accuracy of an empty set"));
    }
    // (correct, total) for overall, many, medium, few
    let mut tally = [(0usize, 0usize); 4];
    for (&p, &y) in preds.iter().zip(labels) {
        let g = *groups
            .get(y)
            .ok_or_else(|| DlsaError::contract(format!("label {y} has no shot group")))?;
        let slot = match g {
            ShotGroup::Many => 1,
            ShotGroup::Medium => 2,
            ShotGroup::Few => 3,
        };
        for s in [0, slot] {
            tally[s].1 += 1;
            tally[s].0 += usize::from(p == y);
        }
    }
    let frac = |(c, n): (usize, usize)| (n > 0).then(|| c as f64 / n as f64);
    Ok(GroupedAccuracy {
        overall: frac(tally[0]).expect("non-empty"),
        many: frac(tally[1]),
        medium: frac(tally[2]),
        few: frac(tally[3]),
    })
}

/// Multiclass Matthews correlation coefficient; 0 when a marginal is degenerate.
pub fn mcc(preds: &[usize], labels: &[usize]) -> Result<f64> {
    same_len("mcc", preds.len(), labels.len())?;
    let c = preds.iter().chain(labels).copied().max().map_or(0, |m| m + 1);
    let mut pred_marg = vec![0f64; c];
    let mut true_marg = vec![0f64; c];
    let mut trace = 0f64;
    for (&p, &y) in preds.iter().zip(labels) {
        pred_marg[p] += 1.0;
        true_marg[y] += 1.0;
        if p == y {
            trace += 1.0;
        }
    }
    let s = labels.len() as f64;
    let pt: f64 = pred_marg.iter().zip(&true_marg).map(|(p, t)| p * t).sum();
    let pp: f64 = pred_marg.iter().map(|p| p * p).sum();
    let tt: f64 = true_marg.iter().map(|t| t * t).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((trace * s - pt) / denom)
}

/// Normaliser for mutual information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalization {
    /// `I / √(H(a)·H(b))`
    #[default]
    Geometric,
    /// `I / ((H(a) + H(b)) / 2)`
    Arithmetic,
}

fn entropy(counts: &HashMap<usize, usize>, n: f64) -> f64 {
    let mut keys: Vec<_> = counts.iter().collect();
    keys.sort_unstable();
    keys.iter()
        .map(|(_, &c)| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information between two labelings of the same samples.
pub fn nmi(a: &[usize], b: &[usize], norm: NmiNormalization) -> Result<f64> {
    same_len("nmi", a.len(), b.len())?;
    if a.is_empty() {
        return Err(DlsaError::contract("nmi of empty labelings"));
    }
    let n = a.len() as f64;
    let mut ca = HashMap::new();
    let mut cb = HashMap::new();
    let mut joint = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_insert(0usize) += 1;
        *cb.entry(y).or_insert(0usize) += 1;
        *joint.entry((x, y)).or_insert(0usize) += 1;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ca.len() == 1 && cb.len() == 1 { 1.0 } else { 0.0 });
    }
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .iter()
        .map(|&((x, y), c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    let denom = match norm {
        NmiNormalization::Geometric => (ha * hb).sqrt(),
        NmiNormalization::Arithmetic => 0.5 * (ha + hb),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPurityEntry {
    pub cluster: usize,
    pub size: usize,
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPurity {
    /// Occupied clusters in ascending id order.
    pub clusters: Vec<ClusterPurityEntry>,
    /// Size-weighted mean purity.
    pub mean: f64,
}

pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> Result<ClusterPurity> {
    same_len("cluster_purity", assignments.len(), labels.len())?;
    if assignments.is_empty() {
        return Err(DlsaError::contract("cluster purity of an empty assignment"));
    }
    let mut per: std::collections::BTreeMap<usize, HashMap<usize, usize>> = Default::default();
    for (&h, &y) in assignments.iter().zip(labels) {
        *per.entry(h).or_default().entry(y).or_insert(0) += 1;
    }
    let mut majority_total = 0usize;
    let clusters = per
        .into_iter()
        .map(|(cluster, hist)| {
            let size: usize = hist.values().sum();
            let top = *hist.values().max().expect("occupied");
            majority_total += top;
            ClusterPurityEntry {
                cluster,
                size,
                purity: top as f64 / size as f64,
            }
        })
        .collect();
    Ok(ClusterPurity {
        clusters,
        mean: majority_total as f64 / assignments.len() as f64,
    })
}

/// Number of samples per cluster id in `0..k`.
pub fn cluster_sizes(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &h in assignments {
        sizes[h] += 1;
    }
    sizes
}

/// Largest over smallest size among occupied clusters; `None` if nothing is occupied.
pub fn occupied_size_ratio(sizes: &[usize]) -> Option<f64> {
    let occupied = sizes.iter().copied().filter(|&s| s > 0);
    let max = occupied.clone().max()?;
    let min = occupied.min()?;
    Some(max as f64 / min as f64)
}

/// Fraction of filtered samples whose class is tail; `None` if nothing was filtered.
pub fn separation_accuracy(filtered: &[bool], is_head: &[bool]) -> Result<Option<f64>> {
    same_len("separation_accuracy", filtered.len(), is_head.len())?;
    let (tail, total) = filtered
        .iter()
        .zip(is_head)
        .filter(|(&f, _)| f)
        .fold((0usize, 0usize), |(t, n), (_, &h)| (t + usize::from(!h), n + 1));
    Ok((total > 0).then(|| tail as f64 / total as f64))
}

/// Ids of classes sorted by descending training count, split into `bins`
/// equal-count groups with the remainder going to the earliest bins.
/// Returns the bin of every class.
pub fn class_bins(counts: &[usize], bins: usize) -> Result<Vec<usize>> {
    let c = counts.len();
    if bins < 2 || bins > c {
        return Err(DlsaError::contract(format!("bin count {bins} must lie in 2..={c}")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let (base, extra) = (c / bins, c % bins);
    let mut bin_of = vec![0; c];
    let mut pos = 0;
    for bin in 0..bins {
        let width = base + usize::from(bin < extra);
        for &class in &order[pos..pos + width] {
            bin_of[class] = bin;
        }
        pos += width;
    }
    Ok(bin_of)
}

/// Bin-level confusion counts over misclassified samples only: row = true
/// bin, column = predicted bin. Correct predictions are omitted, so the total
/// mass equals the number of errors.
pub fn binned_confusion(preds: &[usize], labels: &[usize], counts: &[usize], bins: usize) -> Result<Vec<Vec<u64>>> {
    same_len("binned_confusion", preds.len(), labels.len())?;
    let bin_of = class_bins(counts, bins)?;
    let mut m = vec![vec![0u64; bins]; bins];
    for (&p, &y) in preds.iter().zip(labels) {
        if p != y {
            let (&bp, &by) = bin_of
                .get(p)
                .zip(bin_of.get(y))
                .ok_or_else(|| DlsaError::contract("class id outside the count table"))?;
            m[by][bp] += 1;
        }
    }
    Ok(m)
}

/// Oracle head/tail separation: head samples join group 1 with probability
/// `p`, tail samples join group 2 with probability `p`. Returns `true` for
/// group 1.
pub fn oracle_split(labels: &[usize], class_is_head: &[bool], p: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.5..=1.0).contains(&p) {
        return Err(DlsaError::contract(format!("oracle probability must lie in [0.5, 1], got {p}")));
    }
    labels
        .iter()
        .map(|&y| {
            let head = *class_is_head
                .get(y)
                .ok_or_else(|| DlsaError::contract(format!("label {y} has no head flag")))?;
            let keep = rng.random::<f64>() < p;
            Ok(if head { keep } else { !keep })
        })
        .collect()
}

/// Per-stage diagnostics gathered while routing an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub routed: usize,
    pub separation_accuracy: Option<f64>,
    pub mean_purity: Option<f64>,
    pub cluster_sizes: Vec<usize>,
}

/// Everything `dlsa eval` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub samples: usize,
    pub accuracy: GroupedAccuracy,
    pub mcc: f64,
    pub nmi: f64,
    pub nmi_normalization: NmiNormalization,
    pub residual_routed: usize,
    pub stages: Vec<StageReport>,
    pub confusion_bins: usize,
    pub confusion: Vec<Vec<u64>>,
}

/// Rows of a square count matrix as CSV with a header `true_bin,pred_0,...`.
pub fn confusion_csv(m: &[Vec<u64>]) -> String {
    let mut out = String::from("true_bin");
    for j in 0..m.len() {
        out.push_str(&format!(",pred_{j}"));
    }
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouped_accuracy_fixture() {
        use ShotGroup::*;
        let groups = [Many, Medium, Few];
        let labels = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let preds = [0, 0, 1, 0, 1, 0, 1, 2, 0, 0];
        let g = grouped_accuracy(&preds, &labels, &groups).unwrap();
        assert_eq!(g.overall, 6.0 / 10.0);
        assert_eq!(g.many, Some(3.0 / 4.0));
        assert_eq!(g.medium, Some(2.0 / 3.0));
        assert_eq!(g.few, Some(1.0 / 3.0));
        let g = grouped_accuracy(&[0, 0, 0], &[0, 1, 1], &[Many, Many, Few]).unwrap();
        assert_eq!(g.overall, 1.0 / 3.0);
        assert_eq!(g.few, None);
        assert!(grouped_accuracy(&[0], &[0, 1], &groups).is_err());
    }

    #[test]
    fn mcc_fixtures() {
        assert_eq!(mcc(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(mcc(&[1, 1, 1, 1], &[0, 1, 2, 1]).unwrap(), 0.0);
        // confusion (rows true): [[2,1,0],[0,2,1],[1,0,3]]
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let preds = [0, 0, 1, 1, 1, 2, 2, 2, 2, 0];
        // c=7, s=10, t=(3,3,4), p=(3,3,4)
        let expected = (7.0 * 10.0 - (9.0 + 9.0 + 16.0)) / (100.0 - 34.0);
        assert_eq!(mcc(&preds, &labels).unwrap(), expected);
    }

    #[test]
    fn nmi_fixtures() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&a, &a, NmiNormalization::Geometric).unwrap() - 1.0).abs() < 1e-15);
        let renamed = [7, 7, 3, 3, 9, 9];
        assert!((nmi(&a, &renamed, NmiNormalization::Arithmetic).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmi(&[1, 1, 1], &[4, 4, 4], NmiNormalization::Geometric).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1], &[4, 5, 4], NmiNormalization::Geometric).unwrap(), 0.0);
        // a=(0,0,1,1), b=(0,1,1,1): I = H(b) − H(b|a) = H(1/4) − ½·ln2
        let h = |p: f64| -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        let expected = (h(0.25) - 0.5 * 2f64.ln()) / (2f64.ln() * h(0.25)).sqrt();
        let got = nmi(&[0, 0, 1, 1], &[0, 1, 1, 1], NmiNormalization::Geometric).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn purity_fixtures() {
        let p = cluster_purity(&[4, 4, 4], &[0, 0, 1]).unwrap();
        assert_eq!(p.clusters[0].purity, 2.0 / 3.0);
        assert_eq!(cluster_purity(&[0, 0, 1, 2], &[5, 5, 1, 3]).unwrap().mean, 1.0);
        let p = cluster_purity(&[0; 6], &[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!(p.mean, 1.0 / 3.0);
        assert_eq!(cluster_sizes(&[0, 2, 2], 4), vec![1, 0, 2, 0]);
        assert_eq!(occupied_size_ratio(&[1, 0, 4]), Some(4.0));
        assert_eq!(occupied_size_ratio(&[0, 0]), None);
    }

    #[test]
    fn separation_fixtures() {
        assert_eq!(separation_accuracy(&[true, true, false], &[false, false, true]).unwrap(), Some(1.0));
        assert_eq!(separation_accuracy(&[false, false], &[false, true]).unwrap(), None);
    }

    #[test]
    fn binned_confusion_fixtures() {
        let counts = [50, 40, 30, 20, 10];
        assert_eq!(class_bins(&counts, 2).unwrap(), vec![0, 0, 0, 1, 1]);
        assert_eq!(class_bins(&[1, 9, 5], 3).unwrap(), vec![2, 0, 1]);
        assert!(class_bins(&counts, 6).is_err());
        let labels = [0, 1, 2, 3, 4, 4];
        assert!(binned_confusion(&labels, &labels, &counts, 2).unwrap().iter().flatten().all(|&v| v == 0));
        let preds = [0, 0, 2, 0, 0, 3];
        let m = binned_confusion(&preds, &labels, &counts, 2).unwrap();
        assert_eq!(m, vec![vec![1, 0], vec![2, 1]]);
        assert_eq!(m.iter().flatten().sum::<u64>(), 4);
        assert!(confusion_csv(&m).starts_with("true_bin,pred_0,pred_1\n0,1,0\n"));
    }

    #[test]
    fn oracle_split_anchors() {
        let mut rng = crate::seeded_rng(3);
        let labels = [0, 1, 0, 1, 1];
        let head = [true, false];
        let g = oracle_split(&labels, &head, 1.0, &mut rng).unwrap();
        assert_eq!(g, vec![true, false, true, false, false]);
        assert!(oracle_split(&labels, &head, 0.4, &mut rng).is_err());
    }
}
