//! Evaluation metrics: ROC-AUC and ranking (Hits@k, reciprocal rank).

use crate::error::{Error, Result};

/// Mann-Whitney ROC-AUC with ties credited 0.5, via midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(
            "roc_auc needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tied runs
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub const HITS_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    /// Tie-averaged rank of the positive among the negatives.
    pub rank: f64,
    /// Indicators for k in {1, 3, 5, 10}, using the rank rounded up.
    pub hits: [f64; 4],
    pub reciprocal_rank: f64,
}

/// Rank one positive against its negatives:
/// `rank = 1 + #(neg > pos) + 0.5 * #(neg == pos)`.
pub fn rank_metrics(pos_score: f64, neg_scores: &[f64]) -> Result<RankMetrics> {
    if neg_scores.is_empty() {
        return Err(Error::Invalid("rank_metrics with no negatives".into()));
    }
    if !pos_score.is_finite() || neg_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("rank_metrics score".into()));
    }
    let above = neg_scores.iter().filter(|&&s| s > pos_score).count();
    let tied = neg_scores.iter().filter(|&&s| s == pos_score).count();
    let rank = 1.0 + above as f64 + 0.5 * tied as f64;
    let whole_rank = rank.ceil();
    let mut hits = [0.0; 4];
    for (slot, &k) in HITS_KS.iter().enumerate() {
        hits[slot] = if whole_rank <= k as f64 { 1.0 } else { 0.0 };
    }
    Ok(RankMetrics {
        rank,
        hits,
        reciprocal_rank: 1.0 / rank,
    })
}

/// Mean ranking metrics over many (positive, negatives) queries.
pub fn mean_rank_metrics(per_query: &[RankMetrics]) -> (f64, [f64; 4]) {
    let n = per_query.len().max(1) as f64;
    let mrr = per_query.iter().map(|m| m.reciprocal_rank).sum::<f64>() / n;
    let mut hits = [0.0; 4];
    for m in per_query {
        for (h, &v) in hits.iter_mut().zip(m.hits.iter()) {
            *h += v;
        }
    }
    for h in &mut hits {
        *h /= n;
    }
    (mrr, hits)
}
