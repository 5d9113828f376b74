//! Coherent root-to-leaf prediction and leaf-level classification metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::hierarchy::{LabelTree, NodeId, TreeError};
use crate::hkloss::ScoreVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPrediction {
    /// Root first, leaf last.
    pub path: Vec<NodeId>,
    pub leaf: NodeId,
    /// Sum of the non-root node scores along `path`.
    pub path_score: f64,
}

impl PathPrediction {
    /// Number of scored (non-root) nodes on the path. On trees with leaves at
    /// different depths longer paths accumulate more terms.
    pub fn scored_len(&self) -> usize {
        self.path.len() - 1
    }
}

/// Picks the root-to-leaf path with the largest score sum. Ties go to the
/// first leaf in canonical order.
pub fn infer_path(tree: &LabelTree, scores: &ScoreVector) -> Result<PathPrediction, InferenceError> {
    if scores.len() != tree.num_scored() {
        return Err(InferenceError::LengthMismatch { expected: tree.num_scored(), got: scores.len() });
    }
    // running path sums; parents precede children in canonical order
    let mut prefix = vec![0.0; tree.len()];
    for v in tree.scored_nodes() {
        prefix[v.0] = prefix[tree.parent(v)?.0] + scores.get(v);
    }
    let mut best = tree.leaves()[0];
    for &leaf in &tree.leaves()[1..] {
        if prefix[leaf.0] > prefix[best.0] {
            best = leaf;
        }
    }
    Ok(PathPrediction { path: tree.path_to(best)?, leaf: best, path_score: prefix[best.0] })
}

/// Σ ln s_v along a path, skipping the root: the log-probability of the path
/// when node scores are independent per-node probabilities.
pub fn path_log_probability(scores: &ScoreVector, path: &[NodeId]) -> f64 {
    path.iter().skip(1).map(|&v| scores.get(v).ln()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub leaf: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    /// Macro averages over the leaf classes present in truth or predictions.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall of each leaf that occurs in the ground truth.
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub classes: Vec<ClassStats>,
    /// Leaf names in canonical order; rows are truth, columns predictions.
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(
    tree: &LabelTree,
    predicted: &[NodeId],
    truth: &[NodeId],
) -> Result<MetricsReport, InferenceError> {
    if predicted.len() != truth.len() {
        return Err(InferenceError::LengthMismatch { expected: truth.len(), got: predicted.len() });
    }
    let leaves = tree.leaves();
    let c = leaves.len();
    let position = |v: NodeId| -> Result<usize, InferenceError> {
        tree.name(v)?;
        tree.leaf_position(v)
            .ok_or_else(|| TreeError::NotALeaf(tree.name(v).unwrap_or_default().to_string()).into())
    };
    let mut confusion = vec![vec![0u64; c]; c];
    let mut correct = 0u64;
    for (&p, &t) in predicted.iter().zip(truth) {
        let (pi, ti) = (position(p)?, position(t)?);
        confusion[ti][pi] += 1;
        if pi == ti {
            correct += 1;
        }
    }

    let mut classes = Vec::new();
    let mut per_class_accuracy = BTreeMap::new();
    for k in 0..c {
        let tp = confusion[k][k];
        let support: u64 = confusion[k].iter().sum();
        let predicted_k: u64 = confusion.iter().map(|row| row[k]).sum();
        if support == 0 && predicted_k == 0 {
            continue;
        }
        let precision = ratio(tp, predicted_k);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let leaf = tree.name(leaves[k])?.to_string();
        if support > 0 {
            per_class_accuracy.insert(leaf.clone(), recall);
        }
        classes.push(ClassStats { leaf, support, precision, recall, f1 });
    }
    let mean = |f: fn(&ClassStats) -> f64| -> f64 {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    Ok(MetricsReport {
        samples: truth.len() as u64,
        accuracy: ratio(correct, truth.len() as u64),
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        per_class_accuracy,
        labels: leaves
            .iter()
            .map(|&l| tree.name(l).map(str::to_string))
            .collect::<Result<_, _>>()?,
        confusion,
        classes,
    })
}

impl MetricsReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples: {}", self.samples);
        let _ = writeln!(out, "accuracy: {:.6}", self.accuracy);
        let _ = writeln!(out, "precision: {:.6}", self.precision);
        let _ = writeln!(out, "recall: {:.6}", self.recall);
        let _ = writeln!(out, "f1: {:.6}", self.f1);
        for c in &self.classes {
            let _ = writeln!(
                out,
                "class.{}: support={} precision={:.6} recall={:.6} f1={:.6}",
                c.leaf, c.support, c.precision, c.recall, c.f1
            );
        }
        for (name, row) in self.labels.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "confusion.{}: {}", name, cells.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::cavitation_tree;

    fn example_tree() -> LabelTree {
        LabelTree::build(&[
            ("root", "A"),
            ("root", "B"),
            ("A", "A1"),
            ("A", "A2"),
            ("B", "B1"),
            ("B", "B2"),
        ])
        .unwrap()
    }

    #[test]
    fn example_path() {
        let t = example_tree();
        let s = ScoreVector::new(vec![0.9, 0.2, 0.95, 0.3, 0.4, 0.1]).unwrap();
        let p = infer_path(&t, &s).unwrap();
        assert_eq!(p.leaf, t.id("A1").unwrap());
        assert_eq!(p.path, vec![t.root(), t.id("A").unwrap(), t.id("A1").unwrap()]);
        assert!((p.path_score - 1.85).abs() < 1e-12);
        assert_eq!(p.scored_len(), 2);
    }

    #[test]
    fn ties_pick_first_leaf() {
        let t = example_tree();
        let p = infer_path(&t, &ScoreVector::new(vec![0.5; 6]).unwrap()).unwrap();
        assert_eq!(p.leaf, t.leaves()[0]);
    }

    #[test]
    fn flat_tree_is_argmax() {
        let t = LabelTree::build(&[("r", "a"), ("r", "b"), ("r", "c")]).unwrap();
        let p = infer_path(&t, &ScoreVector::new(vec![0.1, 0.7, 0.3]).unwrap()).unwrap();
        assert_eq!(p.leaf, t.id("b").unwrap());
        assert!(infer_path(&t, &ScoreVector::new(vec![0.1]).unwrap()).is_err());
    }

    #[test]
    fn perfect_metrics() {
        let t = cavitation_tree();
        let truth: Vec<NodeId> = t.leaves().iter().copied().cycle().take(20).collect();
        let m = compute_metrics(&t, &truth, &truth).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        for (k, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), 4);
            assert_eq!(row[k], 4);
        }
    }

    #[test]
    fn four_class_case() {
        let t = LabelTree::build(&[("r", "c1"), ("r", "c2"), ("r", "c3"), ("r", "c4")]).unwrap();
        let c = |n| t.id(n).unwrap();
        let truth = [c("c1"), c("c1"), c("c2"), c("c3")];
        let pred = [c("c1"), c("c2"), c("c2"), c("c3")];
        let m = compute_metrics(&t, &pred, &truth).unwrap();
        assert_eq!(m.accuracy, 0.75);
        // c1: P=1 R=.5, c2: P=.5 R=1, c3: P=1 R=1
        assert!((m.precision - 2.5 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.5 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_class_accuracy["c1"], 0.5);
        assert!(!m.per_class_accuracy.contains_key("c4"));
    }

    #[test]
    fn constant_predictor() {
        let t = cavitation_tree();
        let (a, b) = (t.leaves()[0], t.leaves()[3]);
        let truth = [a, a, b, b];
        let m = compute_metrics(&t, &[a; 4], &truth).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn metric_errors() {
        let t = cavitation_tree();
        let leaf = t.leaves()[0];
        assert!(matches!(
            compute_metrics(&t, &[leaf], &[leaf, leaf]),
            Err(InferenceError::LengthMismatch { .. })
        ));
        assert!(matches!(
            compute_metrics(&t, &[NodeId(1)], &[leaf]),
            Err(InferenceError::Tree(TreeError::NotALeaf(_)))
        ));
    }

    #[test]
    fn text_report_lines() {
        let t = cavitation_tree();
        let leaf = t.leaves()[0];
        let text = compute_metrics(&t, &[leaf], &[leaf]).unwrap().to_text();
        assert!(text.starts_with("samples: 1\naccuracy: 1.000000\n"));
        assert!(text.lines().all(|l| l.contains(": ")));
    }
}
