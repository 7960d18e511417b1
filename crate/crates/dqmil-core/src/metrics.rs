//! Evaluation: AUC, accuracy, attention normalization for localization
//! export, and witness-recovery scoring on synthetic data.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::BagRecord;
use crate::error::{CoreError, Result};
use crate::model::DqModel;
use crate::scalar::Scalar;

/// Aggregate evaluation result over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub bag_count: usize,
    pub per_class_counts: Vec<usize>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from average ranks in
/// O(n log n); the exhaustive pairwise count is the test oracle.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::Dimension(alloc::format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::UndefinedMetric(
            "AUC needs at least one positive and one negative label",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap().then(i.cmp(&j)));

    // Average ranks over tied groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(CoreError::EmptyInput("accuracy over an empty set"));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Run the model over a split and aggregate metrics. Binary tasks score
/// AUC on the positive-class probability; multi-class uses macro
/// one-vs-rest.
pub fn evaluate<F: Scalar>(model: &DqModel<F>, bags: &[BagRecord<F>]) -> Result<EvalReport> {
    if bags.is_empty() {
        return Err(CoreError::EmptyInput("evaluation over an empty split"));
    }
    let k = model.config.classes;
    let mut dists = Vec::with_capacity(bags.len());
    for bag in bags {
        let out = model.evaluate(&bag.embeddings)?;
        dists.push(out.p);
    }
    report_from_distributions(&dists, bags.iter().map(|b| b.label).collect::<Vec<_>>().as_slice(), k)
}

/// Aggregate a report from per-bag class distributions.
pub fn report_from_distributions<F: Scalar>(
    dists: &[Vec<F>],
    labels: &[usize],
    classes: usize,
) -> Result<EvalReport> {
    if dists.is_empty() || dists.len() != labels.len() {
        return Err(CoreError::EmptyInput("report over an empty split"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut per_class = vec![0usize; classes];
    let mut predictions = Vec::with_capacity(dists.len());
    for (dist, &label) in dists.iter().zip(labels) {
        if label >= classes {
            return Err(CoreError::Label { label, classes });
        }
        let pred = argmax(dist);
        confusion[label][pred] += 1;
        per_class[label] += 1;
        predictions.push(pred);
    }
    let accuracy = accuracy(&predictions, labels)?;

    let auc_value = if classes == 2 {
        let scores: Vec<f64> = dists.iter().map(|d| d[1].to_f64()).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        auc(&scores, &pos)?
    } else {
        // Macro one-vs-rest.
        let mut acc = 0.0;
        let mut counted = 0;
        for c in 0..classes {
            let scores: Vec<f64> = dists.iter().map(|d| d[c].to_f64()).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            match auc(&scores, &pos) {
                Ok(v) => {
                    acc += v;
                    counted += 1;
                }
                Err(CoreError::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if counted == 0 {
            return Err(CoreError::UndefinedMetric(
                "no class has both positives and negatives",
            ));
        }
        acc / counted as f64
    };

    Ok(EvalReport {
        auc: auc_value,
        accuracy,
        bag_count: labels.len(),
        per_class_counts: per_class,
        confusion,
    })
}

/// Per-bag localization export: raw attention, min-max normalized scores,
/// and the > 0.95 highlight mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub bag_id: String,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub mask: Vec<bool>,
}

pub const HIGHLIGHT_THRESHOLD: f64 = 0.95;

/// Min-max normalize attention scores to [0, 1] per bag.
///
/// Degenerate cases: a single instance maps to 1.0 (and is highlighted);
/// constant scores over N >= 2 instances map to all zeros with an empty
/// mask.
pub fn normalize_attention(raw: &[f64]) -> (Vec<f64>, Vec<bool>) {
    if raw.len() == 1 {
        return (vec![1.0], vec![true]);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return (vec![0.0; raw.len()], vec![false; raw.len()]);
    }
    let normalized: Vec<f64> = raw.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let mask = normalized.iter().map(|&v| v > HIGHLIGHT_THRESHOLD).collect();
    (normalized, mask)
}

/// Forward one bag and produce its localization export.
pub fn export_attention<F: Scalar>(
    model: &DqModel<F>,
    bag: &BagRecord<F>,
) -> Result<AttentionExport> {
    let out = model.evaluate(&bag.embeddings)?;
    let raw: Vec<f64> = out
        .attention
        .ok_or(CoreError::Config(alloc::string::String::from(
            "attention export needs a variant with the MIL pathway",
        )))?
        .iter()
        .map(|v| v.to_f64())
        .collect();
    let (normalized, mask) = normalize_attention(&raw);
    Ok(AttentionExport {
        bag_id: bag.id.clone(),
        raw,
        normalized,
        mask,
    })
}

/// Fraction of raw attention mass on witness instances, averaged over
/// bags, next to the uniform baseline (mean witness fraction).
pub fn witness_recovery(per_bag: &[(Vec<f64>, Vec<bool>)]) -> Result<(f64, f64)> {
    let mut recovery = 0.0;
    let mut baseline = 0.0;
    let mut count = 0usize;
    for (attention, flags) in per_bag {
        if !flags.iter().any(|&f| f) {
            continue;
        }
        let mass: f64 = attention
            .iter()
            .zip(flags)
            .filter(|(_, &f)| f)
            .map(|(&a, _)| a)
            .sum();
        let witnesses = flags.iter().filter(|&&f| f).count();
        recovery += mass;
        baseline += witnesses as f64 / flags.len() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(CoreError::UndefinedMetric(
            "witness recovery needs at least one positive bag",
        ));
    }
    Ok((recovery / count as f64, baseline / count as f64))
}

/// Shannon entropy of a distribution, in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * libm::log(v))
        .sum()
}
