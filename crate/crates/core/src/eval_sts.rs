//! STS evaluation: cosine scoring, Spearman rank correlation, and the
//! joint-pool language-bias report.
//!
//! The bias metric compares the correlation over the concatenation of all
//! language-pair subsets ("actual") with the average of the per-subset
//! correlations ("expected"). A model that ranks, say, EN-EN pairs
//! systematically above EN-AR pairs loses correlation on the joint pool, so
//! the difference goes negative.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEncoder;
use crate::error::{Error, Result};
use crate::seed;

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::arg(format!("cosine of vectors with dims {} and {}", x.len(), y.len())));
    }
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::arg("cosine of a zero-norm vector"));
    }
    Ok((dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of tie-averaged ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::arg(format!(
            "spearman: pred has {} values, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::arg("spearman needs at least two values"));
    }
    if let Some(side) = [("pred", pred), ("gold", gold)]
        .iter()
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::arg(format!("spearman: {} contains non-finite values", side.0)));
    }
    let rp = average_ranks(pred);
    let rg = average_ranks(gold);
    // 2*rank - (n+1) is an integer, so the sums below are exact; one sqrt of
    // the product keeps rho invariant when every pair is duplicated
    let center = pred.len() as f64 + 1.0;
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rg) {
        let (da, db) = (2.0 * a - center, 2.0 * b - center);
        cov += da * db;
        vp += da * da;
        vg += db * db;
    }
    if vp == 0.0 {
        return Err(Error::arg("spearman: pred is constant"));
    }
    if vg == 0.0 {
        return Err(Error::arg("spearman: gold is constant"));
    }
    Ok((cov / (vp * vg).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f64,
    pub subset: String,
}

/// Reads `subset<TAB>sentence_a<TAB>sentence_b<TAB>gold`; `#` lines are
/// comments.
pub fn load_sts_tsv(path: &Path) -> Result<Vec<StsPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let gold: f64 = f[3]
            .trim()
            .parse()
            .ok()
            .filter(|g: &f64| g.is_finite())
            .ok_or_else(|| parse_err(i + 1, format!("gold score {:?} is not a finite number", f[3])))?;
        if f[0].is_empty() {
            return Err(parse_err(i + 1, "empty subset label".into()));
        }
        out.push(StsPair {
            subset: f[0].to_owned(),
            sentence_a: f[1].to_owned(),
            sentence_b: f[2].to_owned(),
            gold,
        });
    }
    Ok(out)
}

pub fn write_sts_tsv(path: &Path, pairs: &[StsPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        if [&p.subset, &p.sentence_a, &p.sentence_b].iter().any(|f| f.contains(['\t', '\n'])) {
            return Err(Error::arg(format!("STS fields may not contain tabs or newlines: {:?}", p.sentence_a)));
        }
        out.push_str(&format!("{}\t{}\t{}\t{}\n", p.subset, p.sentence_a, p.sentence_b, p.gold));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Predicted and gold scores of one subset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubsetScores {
    pub pred: Vec<f64>,
    pub gold: Vec<f64>,
}

/// Cosine-scores every pair, grouped by subset (name order).
pub fn score_sts_pairs<E: SentenceEncoder>(
    encoder: &E,
    pairs: &[StsPair],
) -> Result<BTreeMap<String, SubsetScores>> {
    let preds: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let a = encoder.encode(&p.sentence_a)?;
            let b = encoder.encode(&p.sentence_b)?;
            cosine(&a, &b).map_err(|e| Error::arg(format!("subset {}: {e}", p.subset)))
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<String, SubsetScores> = BTreeMap::new();
    for (p, s) in pairs.iter().zip(preds) {
        let e = out.entry(p.subset.clone()).or_default();
        e.pred.push(s);
        e.gold.push(p.gold);
    }
    Ok(out)
}

/// How the expected joint score averages the per-subset correlations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointWeighting {
    #[default]
    Unweighted,
    BySize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub test: String,
    pub trials: usize,
    pub seed: u64,
    pub p_value: f64,
}

/// Correlations are reported as rho x 100.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StsReport {
    pub per_subset_rho: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_joint: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actual_joint: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationTest>,
}

impl StsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `kind<TAB>key<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("kind\tkey\tvalue\n");
        for (k, v) in &self.per_subset_rho {
            out.push_str(&format!("rho_x100\t{k}\t{v}\n"));
        }
        for (key, v) in [
            ("expected", self.expected_joint),
            ("actual", self.actual_joint),
            ("difference", self.difference),
        ] {
            if let Some(v) = v {
                out.push_str(&format!("joint\t{key}\t{v}\n"));
            }
        }
        if let Some(p) = &self.permutation {
            out.push_str(&format!("significance\ttest\t{}\n", p.test));
            out.push_str(&format!("significance\ttrials\t{}\n", p.trials));
            out.push_str(&format!("significance\tseed\t{}\n", p.seed));
            out.push_str(&format!("significance\tp_value\t{}\n", p.p_value));
        }
        out
    }
}

fn subset_rhos(per_subset: &BTreeMap<String, SubsetScores>) -> Result<BTreeMap<String, f64>> {
    per_subset
        .iter()
        .map(|(name, s)| {
            spearman(&s.pred, &s.gold)
                .map(|r| (name.clone(), 100.0 * r))
                .map_err(|e| Error::arg(format!("subset {name}: {e}")))
        })
        .collect()
}

/// Per-subset rho x 100 for `encoder` on `pairs`.
pub fn evaluate_sts<E: SentenceEncoder>(encoder: &E, pairs: &[StsPair]) -> Result<StsReport> {
    let scores = score_sts_pairs(encoder, pairs)?;
    Ok(StsReport {
        per_subset_rho: subset_rhos(&scores)?,
        ..StsReport::default()
    })
}

fn expected(rhos: &[f64], sizes: &[usize], weighting: JointWeighting) -> f64 {
    match weighting {
        JointWeighting::Unweighted => rhos.iter().sum::<f64>() / rhos.len() as f64,
        JointWeighting::BySize => {
            let total: usize = sizes.iter().sum();
            rhos.iter().zip(sizes).map(|(r, &n)| r * n as f64).sum::<f64>() / total as f64
        }
    }
}

fn concat(per_subset: &BTreeMap<String, SubsetScores>) -> (Vec<f64>, Vec<f64>) {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for s in per_subset.values() {
        pred.extend_from_slice(&s.pred);
        gold.extend_from_slice(&s.gold);
    }
    (pred, gold)
}

pub fn joint_bias_report(per_subset: &BTreeMap<String, SubsetScores>) -> Result<StsReport> {
    joint_bias_report_weighted(per_subset, JointWeighting::Unweighted)
}

/// Expected joint = mean of per-subset rho x 100; actual joint = rho x 100
/// over the concatenation of all subsets.
pub fn joint_bias_report_weighted(
    per_subset: &BTreeMap<String, SubsetScores>,
    weighting: JointWeighting,
) -> Result<StsReport> {
    if per_subset.is_empty() {
        return Err(Error::arg("bias report needs at least one subset"));
    }
    let rhos = subset_rhos(per_subset)?;
    let sizes: Vec<usize> = per_subset.values().map(|s| s.pred.len()).collect();
    let exp = expected(&rhos.values().copied().collect::<Vec<_>>(), &sizes, weighting);
    let (pred, gold) = concat(per_subset);
    let act = 100.0 * spearman(&pred, &gold).map_err(|e| Error::arg(format!("joint pool: {e}")))?;
    Ok(StsReport {
        per_subset_rho: rhos,
        expected_joint: Some(exp),
        actual_joint: Some(act),
        difference: Some(act - exp),
        permutation: None,
    })
}

/// Permutation test for the bias difference.
///
/// Subset labels are shuffled across the pooled pairs (subset sizes kept)
/// and the difference is recomputed; the p-value is the add-one smoothed
/// fraction of trials whose |difference| reaches the observed one.
pub fn bias_significance(
    per_subset: &BTreeMap<String, SubsetScores>,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    bias_significance_weighted(per_subset, trials, seed, JointWeighting::Unweighted)
}

pub fn bias_significance_weighted(
    per_subset: &BTreeMap<String, SubsetScores>,
    trials: usize,
    seed: u64,
    weighting: JointWeighting,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::arg("permutation test needs at least one trial"));
    }
    let observed = joint_bias_report_weighted(per_subset, weighting)?;
    let obs = observed.difference.unwrap_or(0.0).abs();
    let actual = observed.actual_joint.unwrap_or(0.0);
    let sizes: Vec<usize> = per_subset.values().map(|s| s.pred.len()).collect();
    let (pred, gold) = concat(per_subset);
    let mut rng = seed::derived_rng(seed, "bias-permutation");
    let mut order: Vec<usize> = (0..pred.len()).collect();
    // floating-point slack so an exact null (obs == 0) always counts
    let slack = 1e-9 * obs.max(1.0);
    let mut hits = 0usize;
    for _ in 0..trials {
        order.shuffle(&mut rng);
        let mut rhos = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in &sizes {
            let idx = &order[start..start + n];
            let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let g: Vec<f64> = idx.iter().map(|&i| gold[i]).collect();
            rhos.push(100.0 * spearman(&p, &g)?);
            start += n;
        }
        // the joint pool is the same multiset under any relabeling
        let diff = actual - expected(&rhos, &sizes, weighting);
        if diff.abs() >= obs - slack {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (trials + 1) as f64)
}
