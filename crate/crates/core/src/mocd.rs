//! Modality-specific outlier channel decoupling.
//!
//! Vision outlier channels are the top-`K_v` channels by peak absolute
//! vision activation. Among the remaining channels, text outlier channels
//! are those whose within-token percentile rank is least stable across text
//! tokens: each channel's rank sequence is clustered with 1-D k-means and
//! scored by its mean within-cluster squared deviation. Everything else is
//! the shared main set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SplitqError};
use crate::tensor::{ActivationBatch, Matrix, ModalityTag};

/// Disjoint main / text / vision channel sets covering `0..dim`, each stored
/// ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct ChannelPartition {
    dim: usize,
    main: Vec<usize>,
    text: Vec<usize>,
    vision: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionRepr {
    dim: usize,
    main: Vec<usize>,
    text: Vec<usize>,
    vision: Vec<usize>,
}

impl TryFrom<PartitionRepr> for ChannelPartition {
    type Error = SplitqError;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        ChannelPartition::new(r.dim, r.main, r.text, r.vision)
    }
}

impl From<ChannelPartition> for PartitionRepr {
    fn from(p: ChannelPartition) -> Self {
        PartitionRepr {
            dim: p.dim,
            main: p.main,
            text: p.text,
            vision: p.vision,
        }
    }
}

impl ChannelPartition {
    /// Validates ascending order, disjointness, coverage of `0..dim` and the
    /// cardinality criterion `|main| >= |text|`, `|main| >= |vision|`.
    pub fn new(dim: usize, main: Vec<usize>, text: Vec<usize>, vision: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; dim];
        for (name, set) in [("main", &main), ("text", &text), ("vision", &vision)] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SplitqError::config(format!(
                    "{name} channels must be strictly ascending"
                )));
            }
            for &c in set.iter() {
                if c >= dim {
                    return Err(SplitqError::config(format!(
                        "{name} channel {c} outside 0..{dim}"
                    )));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(SplitqError::config(format!(
                        "channel {c} assigned to more than one set"
                    )));
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(SplitqError::config(format!("channel {c} not assigned")));
        }
        if main.len() < text.len() || main.len() < vision.len() {
            return Err(SplitqError::config(format!(
                "main set ({}) smaller than an outlier set (text {}, vision {})",
                main.len(),
                text.len(),
                vision.len()
            )));
        }
        Ok(Self {
            dim,
            main,
            text,
            vision,
        })
    }

    /// Every channel in the main set.
    pub fn trivial(dim: usize) -> Self {
        Self {
            dim,
            main: (0..dim).collect(),
            text: Vec::new(),
            vision: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn main(&self) -> &[usize] {
        &self.main
    }

    pub fn text(&self) -> &[usize] {
        &self.text
    }

    pub fn vision(&self) -> &[usize] {
        &self.vision
    }

    /// `C_t ∪ C_v`, ascending.
    pub fn outliers(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.text.iter().chain(&self.vision).copied().collect();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MocdConfig {
    pub ratio_vision: f64,
    pub ratio_text: f64,
    pub clusters_k: usize,
    pub kmeans_max_iter: usize,
    /// Carried for reproducibility records; the quantile initialisation
    /// makes clustering independent of it.
    pub seed: u64,
}

impl Default for MocdConfig {
    fn default() -> Self {
        Self {
            ratio_vision: 0.02,
            ratio_text: 0.02,
            clusters_k: 3,
            kmeans_max_iter: 50,
            seed: 0,
        }
    }
}

impl MocdConfig {
    pub fn disabled() -> Self {
        Self {
            ratio_vision: 0.0,
            ratio_text: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("ratio_vision", self.ratio_vision), ("ratio_text", self.ratio_text)] {
            if !(0.0..=0.5).contains(&r) {
                return Err(SplitqError::config(format!("{name} = {r} outside [0, 0.5]")));
            }
        }
        if self.clusters_k == 0 {
            return Err(SplitqError::config("clusters_k must be positive"));
        }
        if self.kmeans_max_iter == 0 {
            return Err(SplitqError::config("kmeans_max_iter must be positive"));
        }
        Ok(())
    }

    /// `(K_v, K_t)`: ratio times channel count, rounded half up.
    pub fn outlier_counts(&self, dim: usize) -> (usize, usize) {
        let k = |r: f64| (r * dim as f64 + 0.5).floor() as usize;
        (k(self.ratio_vision), k(self.ratio_text))
    }
}

/// Peak absolute activation of every channel over the vision tokens.
pub fn vision_score(batch: &ActivationBatch) -> Result<Vec<f64>> {
    let rows = batch.rows_with(ModalityTag::Vision);
    if rows.is_empty() {
        return Err(SplitqError::MissingModality("no vision tokens".into()));
    }
    let x = batch.data();
    let mut score = vec![0.0f64; x.cols()];
    for &i in &rows {
        for (s, v) in score.iter_mut().zip(x.row(i)) {
            *s = s.max(v.abs());
        }
    }
    Ok(score)
}

/// Indices of the `k` largest scores (lower index wins ties), ascending.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(SplitqError::config(format!(
            "top-{k} of {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Within-token percentile ranks of the candidate channels over text tokens.
///
/// Entry `(i, c)` is the fraction of candidates `j` with
/// `|X_ij| <= |X_ic|` for the `i`-th text token; ties count, so every entry
/// lies in `(0, 1]`. Columns follow the order of `candidates`.
pub fn percentile_rank(batch: &ActivationBatch, candidates: &[usize]) -> Result<Matrix> {
    let rows = batch.rows_with(ModalityTag::Text);
    if rows.is_empty() {
        return Err(SplitqError::MissingModality("no text tokens".into()));
    }
    if candidates.is_empty() {
        return Err(SplitqError::config("empty candidate channel set"));
    }
    if let Some(&c) = candidates.iter().find(|&&c| c >= batch.channels()) {
        return Err(SplitqError::dims(format!(
            "candidate channel {c} outside 0..{}",
            batch.channels()
        )));
    }
    let n = candidates.len();
    let mut ranks = Matrix::zeros(rows.len(), n);
    let mut sorted = vec![0.0; n];
    for (r, &i) in rows.iter().enumerate() {
        let x = batch.data().row(i);
        for (s, &c) in sorted.iter_mut().zip(candidates) {
            *s = x[c].abs();
        }
        sorted.sort_by(f64::total_cmp);
        for (j, &c) in candidates.iter().enumerate() {
            let a = x[c].abs();
            let count = sorted.partition_point(|&v| v <= a);
            ranks.set(r, j, count as f64 / n as f64);
        }
    }
    Ok(ranks)
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn nearest(v: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    for (j, &c) in centers.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centers[best]).abs() {
            best = j;
        }
    }
    best
}

/// One-dimensional Lloyd's k-means.
///
/// Centers start at the `(2j - 1) / 2k` quantiles; `k` is reduced to the
/// number of distinct values when there are fewer. Iterates until the
/// assignment is a fixed point or `max_iter` updates. Returns the centers
/// (means of their final clusters) and the assignment.
pub fn kmeans_1d(values: &[f64], k: usize, max_iter: usize) -> (Vec<f64>, Vec<usize>) {
    if values.is_empty() || k == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let k = k.min(distinct.len());
    let mut centers: Vec<f64> = (0..k)
        .map(|j| quantile(&sorted, (2 * j + 1) as f64 / (2 * k) as f64))
        .collect();
    let mut assign: Vec<usize> = values.iter().map(|&v| nearest(v, &centers)).collect();
    let update = |assign: &[usize], centers: &mut Vec<f64>| {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (&v, &a) in values.iter().zip(assign) {
            sum[a] += v;
            count[a] += 1;
        }
        for j in 0..k {
            if count[j] > 0 {
                centers[j] = sum[j] / count[j] as f64;
            }
        }
    };
    for _ in 0..max_iter {
        update(&assign, &mut centers);
        let next: Vec<usize> = values.iter().map(|&v| nearest(v, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    update(&assign, &mut centers);
    (centers, assign)
}

/// Within-cluster variance of each column of `ranks` after k-means with `k`
/// clusters.
pub fn text_score(ranks: &Matrix, k: usize, max_iter: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(SplitqError::config("cluster count must be positive"));
    }
    if ranks.rows() == 0 {
        return Err(SplitqError::MissingModality("no text tokens".into()));
    }
    Ok((0..ranks.cols())
        .map(|c| {
            let col = ranks.column(c);
            let (centers, assign) = kmeans_1d(&col, k, max_iter);
            col.iter()
                .zip(&assign)
                .map(|(&r, &a)| (r - centers[a]).powi(2))
                .sum::<f64>()
                / col.len() as f64
        })
        .collect())
}

/// Runs the full selection and returns the partition.
pub fn build_partition(batch: &ActivationBatch, cfg: &MocdConfig) -> Result<ChannelPartition> {
    cfg.validate()?;
    let dim = batch.channels();
    let (k_v, k_t) = cfg.outlier_counts(dim);
    if k_v + k_t > dim {
        return Err(SplitqError::config(format!(
            "{k_v} vision + {k_t} text outliers exceed {dim} channels"
        )));
    }

    let vision = if k_v > 0 {
        select_topk(&vision_score(batch)?, k_v)?
    } else {
        Vec::new()
    };

    let vision_set: BTreeSet<usize> = vision.iter().copied().collect();
    let remaining: Vec<usize> = (0..dim).filter(|c| !vision_set.contains(c)).collect();

    let text = if k_t > 0 {
        let ranks = percentile_rank(batch, &remaining)?;
        let scores = text_score(&ranks, cfg.clusters_k, cfg.kmeans_max_iter)?;
        let mut picked: Vec<usize> = select_topk(&scores, k_t)?
            .into_iter()
            .map(|j| remaining[j])
            .collect();
        picked.sort_unstable();
        picked
    } else {
        Vec::new()
    };

    let text_set: BTreeSet<usize> = text.iter().copied().collect();
    let main = remaining
        .into_iter()
        .filter(|c| !text_set.contains(c))
        .collect();
    ChannelPartition::new(dim, main, text, vision)
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets counting as identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
