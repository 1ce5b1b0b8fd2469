//! Accuracy, AUC-ROC (ties count one half) and AUC-PR (average precision).

use std::cmp::Ordering;

/// Index of the largest probability; the first one wins ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    hits as f64 / labels.len() as f64
}

// Indices sorted by ascending score, then runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]].total_cmp(&scores[i]) == Ordering::Equal => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann-Whitney statistic from average ranks, normalized to `[0, 1]`.
/// `None` when either class is absent.
pub fn auc_roc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut next_rank = 1usize;
    for g in tie_groups(scores) {
        // average of ranks next_rank ..= next_rank + len - 1
        let avg = next_rank as f64 + (g.len() - 1) as f64 / 2.0;
        rank_sum += avg * g.iter().filter(|&&i| positive[i]).count() as f64;
        next_rank += g.len();
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: the mean, over positives, of the precision at that
/// positive's score threshold (all examples scoring at least as high).
pub fn auc_pr(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return None;
    }
    let (mut tp, mut seen, mut total) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores).into_iter().rev() {
        let k = g.iter().filter(|&&i| positive[i]).count();
        tp += k;
        seen += g.len();
        total += k as f64 * (tp as f64 / seen as f64);
    }
    Some(total / n_pos as f64)
}

fn macro_average(
    probs: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    metric: fn(&[f64], &[bool]) -> Option<f64>,
) -> Option<f64> {
    if n_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return metric(&scores, &pos);
    }
    let mut sum = 0.0;
    for k in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        sum += metric(&scores, &pos)?;
    }
    Some(sum / n_classes as f64)
}

/// Binary: scores are `probs[1]`. More classes: one-vs-rest macro average,
/// `None` if any class is absent.
pub fn multiclass_auc_roc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Option<f64> {
    macro_average(probs, labels, n_classes, auc_roc)
}

pub fn multiclass_auc_pr(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Option<f64> {
    macro_average(probs, labels, n_classes, auc_pr)
}
