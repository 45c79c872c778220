//! Classification metrics: top-k accuracy, mean per-class accuracy, mean
//! average precision, ROC AUC, and d-prime.
//!
//! Ranking metrics are permutation invariant: AUC handles score ties with
//! the average-rank convention, and average precision ranks tied negatives
//! ahead of tied positives, so reordering the dataset never changes a value.

use crate::error::{Error, Result};

/// Row-wise softmax over flat `[N, K]` logits.
pub fn softmax_rows(logits: &[f32], num_classes: usize) -> Vec<f32> {
    assert_eq!(logits.len() % num_classes, 0);
    let mut out = vec![0.0f32; logits.len()];
    for (row, orow) in logits.chunks(num_classes).zip(out.chunks_mut(num_classes)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0;
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - max).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    out
}

/// Argmax prediction per row; ties go to the lower class index.
pub fn argmax_rows(scores: &[f32], num_classes: usize) -> Vec<usize> {
    scores
        .chunks(num_classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Percentage of samples whose label is among the k highest scores, ties
/// broken toward lower class indices.
pub fn topk_accuracy(scores: &[f32], num_classes: usize, labels: &[usize], k: usize) -> f32 {
    assert!(k >= 1 && k <= num_classes, "k must be in 1..=num_classes");
    assert_eq!(scores.len(), labels.len() * num_classes);
    let mut hits = 0usize;
    for (row, &label) in scores.chunks(num_classes).zip(labels) {
        let s = row[label];
        let mut ahead = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > s || (v == s && j < label) {
                ahead += 1;
            }
        }
        if ahead < k {
            hits += 1;
        }
    }
    100.0 * hits as f32 / labels.len() as f32
}

/// Unweighted mean of per-class recalls, as a percentage. Classes with no
/// samples are excluded; the second value counts them.
pub fn mean_per_class_accuracy(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> (f32, usize) {
    assert_eq!(preds.len(), labels.len());
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let mut sum = 0.0f64;
    let mut present = 0usize;
    for c in 0..num_classes {
        if total[c] > 0 {
            sum += correct[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    let excluded = num_classes - present;
    if present == 0 {
        return (0.0, excluded);
    }
    ((100.0 * sum / present as f64) as f32, excluded)
}

/// Average precision of one binary ranking: `sum_k precision@k * hit_k /
/// n_positives`. Tied scores rank negatives first. `None` without positives.
pub fn average_precision(scores: &[f32], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| positives[a].cmp(&positives[b]))
    });
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Macro-averaged one-vs-rest average precision over per-class score
/// columns. `scores` is flat `[N, K]`. Returns (mAP, excluded classes).
pub fn mean_average_precision(
    scores: &[f32],
    num_classes: usize,
    labels: &[usize],
) -> (f64, usize) {
    let n = labels.len();
    assert_eq!(scores.len(), n * num_classes);
    let mut sum = 0.0f64;
    let mut used = 0usize;
    for c in 0..num_classes {
        let column: Vec<f32> = (0..n).map(|i| scores[i * num_classes + c]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(ap) = average_precision(&column, &positives) {
            sum += ap;
            used += 1;
        }
    }
    if used == 0 {
        return (0.0, num_classes);
    }
    (sum / used as f64, num_classes - used)
}

/// ROC AUC as the Mann-Whitney U statistic over positive/negative pairs,
/// ties counted half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f32], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks within tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positives[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro-averaged one-vs-rest AUC. Returns (mAUC, excluded classes).
pub fn macro_auc(scores: &[f32], num_classes: usize, labels: &[usize]) -> (f64, usize) {
    let n = labels.len();
    assert_eq!(scores.len(), n * num_classes);
    let mut sum = 0.0f64;
    let mut used = 0usize;
    for c in 0..num_classes {
        let column: Vec<f32> = (0..n).map(|i| scores[i * num_classes + c]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(auc) = roc_auc(&column, &positives) {
            sum += auc;
            used += 1;
        }
    }
    if used == 0 {
        return (0.0, num_classes);
    }
    (sum / used as f64, num_classes - used)
}

/// Standard normal quantile via Acklam's rational approximation; absolute
/// error below 1e-8 across (0, 1).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Detection-theory separation: `sqrt(2) * quantile(auc)`.
pub fn d_prime(auc: f64) -> Result<f64> {
    if !(auc > 0.0 && auc < 1.0) {
        return Err(Error::invalid(format!(
            "d_prime needs auc strictly inside (0,1), got {auc}"
        )));
    }
    Ok(std::f64::consts::SQRT_2 * inverse_normal_cdf(auc))
}

/// The full evaluation summary: accuracy and ranking metrics plus a
/// per-class table and the count of classes excluded from macro averages.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub top1: f32,
    pub top5: f32,
    pub mpca: f32,
    pub map: f64,
    pub mauc: f64,
    /// `None` when mAUC sits on 0 or 1 where the quantile diverges.
    pub d_prime: Option<f64>,
    pub per_class: Vec<PerClassRow>,
    pub excluded_classes: usize,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct PerClassRow {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
}

impl EvalReport {
    /// Key=value serialization used by training logs and the CLI.
    pub fn to_kv_lines(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("samples={}\n", self.samples));
        s.push_str(&format!("top1={:.2}\n", self.top1));
        s.push_str(&format!("top5={:.2}\n", self.top5));
        s.push_str(&format!("mpca={:.2}\n", self.mpca));
        s.push_str(&format!("map={:.4}\n", self.map));
        s.push_str(&format!("mauc={:.4}\n", self.mauc));
        match self.d_prime {
            Some(d) => s.push_str(&format!("d_prime={d:.3}\n")),
            None => s.push_str("d_prime=undefined\n"),
        }
        s.push_str(&format!("excluded_classes={}\n", self.excluded_classes));
        for row in &self.per_class {
            s.push_str(&format!(
                "class.{}.count={} class.{}.correct={}\n",
                row.class, row.count, row.class, row.correct
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn topk_hand_cases() {
        // one-hot-correct logits
        let scores = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(topk_accuracy(&scores, 3, &[1, 2], 1), 100.0);
        // k = num_classes is always 100
        let bad = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(topk_accuracy(&bad, 3, &[2, 1], 3), 100.0);
        // 3-sample case checked by exhaustive enumeration by hand:
        // row0: label 0 has rank 2 -> in top2 but not top1
        // row1: label 1 is max -> top1
        // row2: label 2 ranks 3rd -> outside top2
        let s = vec![
            0.2, 0.7, 0.1, //
            0.1, 0.8, 0.1, //
            0.5, 0.3, 0.2,
        ];
        let labels = [0, 1, 2];
        assert!((topk_accuracy(&s, 3, &labels, 1) - 100.0 / 3.0).abs() < 1e-4);
        assert!((topk_accuracy(&s, 3, &labels, 2) - 200.0 / 3.0).abs() < 1e-4);
        assert_eq!(topk_accuracy(&s, 3, &labels, 3), 100.0);
    }

    #[test]
    fn topk_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 50;
        let k_classes = 7;
        let scores: Vec<f32> = (0..n * k_classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k_classes)).collect();
        let transformed: Vec<f32> = scores.iter().map(|&v| (2.0 * v + 1.0).tanh() * 5.0).collect();
        for k in 1..=k_classes {
            assert_eq!(
                topk_accuracy(&scores, k_classes, &labels, k),
                topk_accuracy(&transformed, k_classes, &labels, k)
            );
        }
    }

    #[test]
    fn mpca_hand_cases() {
        // balanced perfect
        let (v, ex) = mean_per_class_accuracy(&[0, 1, 0, 1], &[0, 1, 0, 1], 2);
        assert_eq!((v, ex), (100.0, 0));
        // always predicting class 0 on a balanced 2-class set
        let (v, _) = mean_per_class_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1], 2);
        assert_eq!(v, 50.0);
        // class A 3/4 right, class B 1/2 right -> (75 + 50)/2 = 62.5
        let preds = [0, 0, 0, 1, 1, 0];
        let labels = [0, 0, 0, 0, 1, 1];
        let (v, _) = mean_per_class_accuracy(&preds, &labels, 2);
        assert_eq!(v, 62.5);
        // absent class is excluded and counted
        let (v, ex) = mean_per_class_accuracy(&[0], &[0], 3);
        assert_eq!((v, ex), (100.0, 2));
    }

    #[test]
    fn average_precision_hand_cases() {
        // perfect ranking
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
        // single positive ranked 2nd of 4 -> AP = 1/2
        let ap = average_precision(&[0.9, 0.8, 0.3, 0.1], &[false, true, false, false]).unwrap();
        assert_eq!(ap, 0.5);
        // no positives -> excluded
        assert!(average_precision(&[0.5, 0.4], &[false, false]).is_none());
    }

    #[test]
    fn ranking_metrics_are_permutation_invariant_with_ties() {
        let scores = [0.5f32, 0.5, 0.5, 0.9, 0.1, 0.5];
        let pos = [true, false, false, true, false, true];
        let ap0 = average_precision(&scores, &pos).unwrap();
        let auc0 = roc_auc(&scores, &pos).unwrap();
        // a couple of hand permutations
        for perm in [[5usize, 4, 3, 2, 1, 0], [2, 0, 5, 1, 4, 3]] {
            let s: Vec<f32> = perm.iter().map(|&i| scores[i]).collect();
            let p: Vec<bool> = perm.iter().map(|&i| pos[i]).collect();
            assert_eq!(average_precision(&s, &p).unwrap(), ap0);
            assert_eq!(roc_auc(&s, &p).unwrap(), auc0);
        }
    }

    #[test]
    fn roc_auc_hand_cases_and_pair_counting_oracle() {
        // perfectly separated
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        // identical distributions -> 0.5
        let auc = roc_auc(&[0.3, 0.3, 0.3, 0.3], &[true, false, true, false]).unwrap();
        assert_eq!(auc, 0.5);
        // 6-point case vs exhaustive O(n^2) pair counting
        let scores = [0.1f32, 0.4, 0.35, 0.8, 0.4, 0.7];
        let pos = [false, true, false, true, false, true];
        let auc = roc_auc(&scores, &pos).unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..6 {
            for j in 0..6 {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        assert!((auc - num / den).abs() < 1e-12);
        // single-class input is excluded
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_none());
    }

    #[test]
    fn random_scores_give_chance_level_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let k = 10;
        let scores: Vec<f32> = (0..n * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let top1 = topk_accuracy(&scores, k, &labels, 1);
        assert!((top1 - 10.0).abs() < 3.0, "top1 {top1}");
        let (mauc, ex) = macro_auc(&scores, k, &labels);
        assert_eq!(ex, 0);
        assert!((mauc - 0.5).abs() < 0.03, "mauc {mauc}");
        let (map, _) = mean_average_precision(&scores, k, &labels);
        assert!((map - 0.1).abs() < 0.03, "map {map} vs positive rate 0.1");
    }

    #[test]
    fn quantile_matches_reference_implementation() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        for i in 1..999 {
            let p = i as f64 / 1000.0;
            let ours = inverse_normal_cdf(p);
            let reference = normal.inverse_cdf(p);
            assert!(
                (ours - reference).abs() < 1e-6,
                "p={p}: {ours} vs {reference}"
            );
        }
    }

    #[test]
    fn d_prime_examples_and_properties() {
        assert_eq!(d_prime(0.5).unwrap(), 0.0);
        // the published operating points for two strong audio classifiers
        let d976 = d_prime(0.976).unwrap();
        assert!((d976 - 2.80).abs() <= 0.01, "d'(0.976) = {d976}");
        let d973 = d_prime(0.973).unwrap();
        assert!((d973 - 2.72).abs() <= 0.02, "d'(0.973) = {d973}");
        // strictly increasing, antisymmetric about 0.5
        let mut last = f64::NEG_INFINITY;
        for i in 1..100 {
            let a = i as f64 / 100.0;
            let d = d_prime(a).unwrap();
            assert!(d > last);
            last = d;
            let mirrored = d_prime(1.0 - a).unwrap();
            assert!((d + mirrored).abs() < 1e-9);
        }
        assert!(d_prime(0.0).is_err());
        assert!(d_prime(1.0).is_err());
    }

    #[test]
    fn report_serializes_stably() {
        let report = EvalReport {
            top1: 75.0,
            top5: 100.0,
            mpca: 70.5,
            map: 0.8123,
            mauc: 0.9,
            d_prime: Some(d_prime(0.9).unwrap()),
            per_class: vec![PerClassRow { class: 0, count: 4, correct: 3, ap: Some(1.0), auc: Some(1.0) }],
            excluded_classes: 0,
            samples: 8,
        };
        let kv = report.to_kv_lines();
        assert!(kv.contains("top1=75.00"));
        assert!(kv.contains("mauc=0.9000"));
        assert!(kv.contains("class.0.count=4"));
    }
}
