//! Hierarchy-constrained classification losses.
//!
//! Scores live on every non-root node. The hierarchical tree (HT) loss
//! replaces each positive node's score by the minimum over its ancestor chain
//! and each negative node's score by the maximum over its subtree, then
//! applies binary cross-entropy. The focal variant (FHT) multiplies every term
//! by a modulating factor with focusing exponent `gamma`.
//!
//! Min and max are either exact (`Aggregation::Hard`, full subgradient routed
//! to the first extremum in canonical order) or LogSumExp-smoothed
//! (`Aggregation::Smooth`). All gradients are analytic; `grad_logits` chains
//! through `s = sigmoid(z)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{HierLabel, LabelTree, NodeId, WeightScheme};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Focusing exponents outside this range are rejected.
pub const GAMMA_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("gamma {0} outside [0, 5]")]
    GammaOutOfRange(f64),
    #[error("smoothing beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("score {value} at position {index} outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
}

/// Per-node probabilities for all non-root nodes; position `i` holds node `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(LossError::ScoreOutOfRange { index, value });
        }
        Ok(ScoreVector(values))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        ScoreVector(logits.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Score of a non-root node.
    pub fn get(&self, v: NodeId) -> f64 {
        self.0[v.0 - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// d loss / d s_v
    pub grad_scores: Vec<f64>,
    /// d loss / d z_v with s_v = sigmoid(z_v)
    pub grad_logits: Vec<f64>,
}

/// How the min over ancestors and max over descendants are taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Aggregation {
    Hard,
    Smooth { beta: f64 },
}

impl Aggregation {
    pub fn validate(self) -> Result<Self, LossError> {
        match self {
            Aggregation::Smooth { beta } if !(beta > 0.0) => Err(LossError::NonPositiveBeta(beta)),
            _ => Ok(self),
        }
    }
}

fn check_beta(beta: f64) -> Result<(), LossError> {
    if beta > 0.0 {
        Ok(())
    } else {
        Err(LossError::NonPositiveBeta(beta))
    }
}

/// `-(1/beta) ln Σ exp(-beta x_i)`, shifted by the minimum for stability.
pub fn smooth_min(values: &[f64], beta: f64) -> Result<f64, LossError> {
    smooth_min_with_grad(values, beta).map(|(v, _)| v)
}

/// `(1/beta) ln Σ exp(beta x_i)`, shifted by the maximum for stability.
pub fn smooth_max(values: &[f64], beta: f64) -> Result<f64, LossError> {
    smooth_max_with_grad(values, beta).map(|(v, _)| v)
}

/// Smooth minimum and its softmax weights `d/dx_i`.
pub fn smooth_min_with_grad(values: &[f64], beta: f64) -> Result<(f64, Vec<f64>), LossError> {
    if values.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_beta(beta)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.iter().map(|&x| (-beta * (x - lo)).exp()).collect();
    let total: f64 = exps.iter().sum();
    let value = lo - total.ln() / beta;
    Ok((value, exps.into_iter().map(|e| e / total).collect()))
}

/// Smooth maximum and its softmax weights `d/dx_i`.
pub fn smooth_max_with_grad(values: &[f64], beta: f64) -> Result<(f64, Vec<f64>), LossError> {
    if values.is_empty() {
        return Err(LossError::EmptyInput);
    }
    check_beta(beta)?;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&x| (beta * (x - hi)).exp()).collect();
    let total: f64 = exps.iter().sum();
    let value = hi + total.ln() / beta;
    Ok((value, exps.into_iter().map(|e| e / total).collect()))
}

fn clamp_prob(s: f64) -> f64 {
    s.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

// derivative of the clamp: pass-through inside the interval
fn clamp_pass(s: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&s) {
        1.0
    } else {
        0.0
    }
}

fn check_lengths(tree: Option<&LabelTree>, scores: &ScoreVector, label: &HierLabel) -> Result<(), LossError> {
    let expected = label.num_nodes() - 1;
    if scores.len() != expected {
        return Err(LossError::LengthMismatch { expected, got: scores.len() });
    }
    if let Some(t) = tree {
        if t.len() != label.num_nodes() {
            return Err(LossError::LengthMismatch { expected: t.len(), got: label.num_nodes() });
        }
    }
    Ok(())
}

fn finish(value: f64, grad_scores: Vec<f64>, scores: &ScoreVector) -> LossResult {
    let grad_logits = grad_scores
        .iter()
        .zip(scores.as_slice())
        .map(|(g, s)| g * s * (1.0 - s))
        .collect();
    LossResult { value, grad_scores, grad_logits }
}

/// Plain binary cross-entropy over all non-root nodes.
pub fn bce_loss(scores: &ScoreVector, label: &HierLabel) -> Result<LossResult, LossError> {
    check_lengths(None, scores, label)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for (i, &raw) in scores.as_slice().iter().enumerate() {
        let s = clamp_prob(raw);
        if label.is_positive(NodeId(i + 1)) {
            value += -s.ln();
            grad[i] = -1.0 / s * clamp_pass(raw);
        } else {
            value += -(1.0 - s).ln();
            grad[i] = 1.0 / (1.0 - s) * clamp_pass(raw);
        }
    }
    Ok(finish(value, grad, scores))
}

/// Hierarchy-consistent scores: ancestor-min on positives, subtree-max on
/// negatives.
pub fn constrained_scores(
    tree: &LabelTree,
    scores: &ScoreVector,
    label: &HierLabel,
) -> Result<ScoreVector, LossError> {
    check_lengths(Some(tree), scores, label)?;
    let s = scores.as_slice();
    let out = tree
        .scored_nodes()
        .map(|v| {
            if label.is_positive(v) {
                hard_extremum(tree.ancestors(v).expect("valid node"), s, Extremum::Min).1
            } else {
                hard_extremum(tree.descendants(v).expect("valid node"), s, Extremum::Max).1
            }
        })
        .collect();
    Ok(ScoreVector(out))
}

#[derive(Clone, Copy)]
enum Extremum {
    Min,
    Max,
}

// first extremum in canonical order: (node, value)
fn hard_extremum(set: &[NodeId], s: &[f64], which: Extremum) -> (NodeId, f64) {
    let mut best = set[0];
    let mut best_val = s[best.0 - 1];
    for &u in &set[1..] {
        let x = s[u.0 - 1];
        let better = match which {
            Extremum::Min => x < best_val,
            Extremum::Max => x > best_val,
        };
        if better {
            best = u;
            best_val = x;
        }
    }
    (best, best_val)
}

// aggregated value plus sparse (score position, d agg / d s) pairs
fn aggregate(set: &[NodeId], s: &[f64], which: Extremum, agg: Aggregation) -> (f64, Vec<(usize, f64)>) {
    match agg {
        Aggregation::Hard => {
            let (node, val) = hard_extremum(set, s, which);
            (val, vec![(node.0 - 1, 1.0)])
        }
        Aggregation::Smooth { beta } => {
            let xs: Vec<f64> = set.iter().map(|u| s[u.0 - 1]).collect();
            let (val, w) = match which {
                Extremum::Min => smooth_min_with_grad(&xs, beta),
                Extremum::Max => smooth_max_with_grad(&xs, beta),
            }
            .expect("nonempty set with validated beta");
            (val, set.iter().map(|u| u.0 - 1).zip(w).collect())
        }
    }
}

// -(1-a)^γ ln a and its derivative in a
fn positive_term(a: f64, gamma: f64) -> (f64, f64) {
    let q = 1.0 - a;
    let modulator = q.powf(gamma);
    let value = -(modulator * a.ln());
    let mut d = -modulator / a;
    if gamma != 0.0 {
        d += gamma * q.powf(gamma - 1.0) * a.ln();
    }
    (value, d)
}

// -b^γ ln(1-b) and its derivative in b
fn negative_term(b: f64, gamma: f64) -> (f64, f64) {
    let modulator = b.powf(gamma);
    let value = -(modulator * (1.0 - b).ln());
    let mut d = modulator / (1.0 - b);
    if gamma != 0.0 {
        d -= gamma * b.powf(gamma - 1.0) * (1.0 - b).ln();
    }
    (value, d)
}

/// Hierarchical tree loss; identical to [`fht_loss`] with `gamma = 0`.
pub fn ht_loss(
    tree: &LabelTree,
    scores: &ScoreVector,
    label: &HierLabel,
    weights: WeightScheme,
    agg: Aggregation,
) -> Result<LossResult, LossError> {
    hierarchical_loss(tree, scores, label, 0.0, weights, agg)
}

/// Focal hierarchical tree loss with focusing exponent `gamma` in `[0, 5]`.
pub fn fht_loss(
    tree: &LabelTree,
    scores: &ScoreVector,
    label: &HierLabel,
    gamma: f64,
    weights: WeightScheme,
    agg: Aggregation,
) -> Result<LossResult, LossError> {
    if !(0.0..=GAMMA_MAX).contains(&gamma) {
        return Err(LossError::GammaOutOfRange(gamma));
    }
    hierarchical_loss(tree, scores, label, gamma, weights, agg)
}

fn hierarchical_loss(
    tree: &LabelTree,
    scores: &ScoreVector,
    label: &HierLabel,
    gamma: f64,
    weights: WeightScheme,
    agg: Aggregation,
) -> Result<LossResult, LossError> {
    check_lengths(Some(tree), scores, label)?;
    let agg = agg.validate()?;
    let level = tree.level_weights(weights);
    let raw = scores.as_slice();
    let clamped: Vec<f64> = raw.iter().map(|&s| clamp_prob(s)).collect();

    let mut value = 0.0;
    let mut grad = vec![0.0; raw.len()];
    for v in tree.scored_nodes() {
        let w = level.weight(tree.depth(v).expect("valid node"));
        let positive = label.is_positive(v);
        let (set, which) = if positive {
            (tree.ancestors(v).expect("valid node"), Extremum::Min)
        } else {
            (tree.descendants(v).expect("valid node"), Extremum::Max)
        };
        let (a, parts) = aggregate(set, &clamped, which, agg);
        let a_c = clamp_prob(a);
        let (term, d_term) = if positive {
            positive_term(a_c, gamma)
        } else {
            negative_term(a_c, gamma)
        };
        value += w * term;
        let outer = w * d_term * clamp_pass(a);
        if outer != 0.0 {
            for (i, g) in parts {
                grad[i] += outer * g * clamp_pass(raw[i]);
            }
        }
    }
    Ok(finish(value, grad, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::LabelTree;

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

    // canonical order: A, B, A1, A2, B1, B2
    fn example_scores() -> ScoreVector {
        ScoreVector::new(vec![0.9, 0.2, 0.95, 0.3, 0.4, 0.1]).unwrap()
    }

    fn a1_label(t: &LabelTree) -> HierLabel {
        t.expand_leaf_label(t.id("A1").unwrap()).unwrap()
    }

    #[test]
    fn bce_symmetric_point() {
        let t = LabelTree::build(&[("r", "a")]).unwrap();
        let label = t.expand_leaf_label(NodeId(1)).unwrap();
        let out = bce_loss(&ScoreVector::new(vec![0.5]).unwrap(), &label).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = bce_loss(&ScoreVector::new(vec![1.0]).unwrap(), &label).unwrap();
        assert!(perfect.value < 1e-6);
    }

    #[test]
    fn bce_term_by_term() {
        let t = example_tree();
        let label = a1_label(&t);
        let s = [0.9, 0.2, 0.95, 0.3, 0.4, 0.1];
        let expected = -(0.9f64.ln()) - (0.8f64).ln() - (0.95f64).ln() - 0.7f64.ln() - 0.6f64.ln() - 0.9f64.ln();
        let out = bce_loss(&ScoreVector::new(s.to_vec()).unwrap(), &label).unwrap();
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let t = example_tree();
        let label = a1_label(&t);
        let short = ScoreVector::new(vec![0.5; 3]).unwrap();
        assert_eq!(
            bce_loss(&short, &label).unwrap_err(),
            LossError::LengthMismatch { expected: 6, got: 3 }
        );
        assert!(ht_loss(&t, &short, &label, WeightScheme::None, Aggregation::Hard).is_err());
    }

    #[test]
    fn constrained_example() {
        let t = example_tree();
        let out = constrained_scores(&t, &example_scores(), &a1_label(&t)).unwrap();
        assert_eq!(out.as_slice(), &[0.9, 0.4, 0.9, 0.3, 0.4, 0.1]);
    }

    #[test]
    fn consistent_scores_are_a_fixed_point() {
        let t = example_tree();
        let s = ScoreVector::new(vec![0.9, 0.4, 0.8, 0.3, 0.4, 0.1]).unwrap();
        assert_eq!(constrained_scores(&t, &s, &a1_label(&t)).unwrap(), s);

        let flat = LabelTree::build(&[("r", "a"), ("r", "b"), ("r", "c")]).unwrap();
        let s = ScoreVector::new(vec![0.2, 0.9, 0.4]).unwrap();
        let label = flat.expand_leaf_label(NodeId(1)).unwrap();
        assert_eq!(constrained_scores(&flat, &s, &label).unwrap(), s);
    }

    #[test]
    fn ht_example_value() {
        let t = example_tree();
        let out = ht_loss(&t, &example_scores(), &a1_label(&t), WeightScheme::None, Aggregation::Hard).unwrap();
        let expected = 2.0 * -(0.9f64.ln()) + -(0.7f64.ln()) + 2.0 * -(0.6f64.ln()) + -(0.9f64.ln());
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 1.69441).abs() < 1e-5);
    }

    #[test]
    fn ht_routes_gradient_to_extremum() {
        let t = example_tree();
        let out = ht_loss(&t, &example_scores(), &a1_label(&t), WeightScheme::None, Aggregation::Hard).unwrap();
        // A1's positive term uses min(A, A1) = A, so A1 receives nothing
        assert_eq!(out.grad_scores[2], 0.0);
        // B1 is the max for B and for B1
        assert!((out.grad_scores[4] - 2.0 / 0.6).abs() < 1e-12);
        assert_eq!(out.grad_scores[1], 0.0);
    }

    #[test]
    fn ht_perfect_prediction() {
        let t = example_tree();
        let s = ScoreVector::new(vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = ht_loss(&t, &s, &a1_label(&t), WeightScheme::Phw, Aggregation::Hard).unwrap();
        assert!(out.value < 1e-5);
    }

    #[test]
    fn flat_tree_ht_equals_bce() {
        let flat = LabelTree::build(&[("r", "a"), ("r", "b"), ("r", "c")]).unwrap();
        let s = ScoreVector::new(vec![0.2, 0.9, 0.4]).unwrap();
        let label = flat.expand_leaf_label(NodeId(2)).unwrap();
        let ht = ht_loss(&flat, &s, &label, WeightScheme::None, Aggregation::Hard).unwrap();
        let bce = bce_loss(&s, &label).unwrap();
        assert_eq!(ht.value.to_bits(), bce.value.to_bits());
        assert_eq!(ht.grad_logits, bce.grad_logits);
    }

    #[test]
    fn focal_examples() {
        let t = example_tree();
        let s = example_scores();
        let label = a1_label(&t);
        let ht = ht_loss(&t, &s, &label, WeightScheme::Nhw, Aggregation::Hard).unwrap();
        let f0 = fht_loss(&t, &s, &label, 0.0, WeightScheme::Nhw, Aggregation::Hard).unwrap();
        assert!((ht.value - f0.value).abs() <= 1e-12);

        let (term, _) = positive_term(0.9, 2.0);
        assert!((term - 0.01 * -(0.9f64.ln())).abs() < 1e-15);
        assert!((term - 1.0536e-3).abs() < 1e-7);

        assert_eq!(positive_term(1.0, 2.0).0.abs(), 0.0);
        assert_eq!(
            fht_loss(&t, &s, &label, 5.5, WeightScheme::None, Aggregation::Hard).unwrap_err(),
            LossError::GammaOutOfRange(5.5)
        );
    }

    #[test]
    fn smooth_aggregates() {
        assert_eq!(smooth_min(&[0.37], 3.0).unwrap(), 0.37);
        assert_eq!(smooth_max(&[0.37], 1e3).unwrap(), 0.37);
        let m = smooth_min(&[0.2, 0.8], 50.0).unwrap();
        assert!(m <= 0.2 && m >= 0.2 - 2f64.ln() / 50.0);
        assert!((smooth_max(&[0.3, 0.7], 1e6).unwrap() - 0.7).abs() < 1e-5);
        assert_eq!(smooth_min(&[], 1.0), Err(LossError::EmptyInput));
        assert_eq!(smooth_max(&[1.0], 0.0), Err(LossError::NonPositiveBeta(0.0)));
        // overflow safety
        assert!((smooth_max(&[1000.0, 999.0], 10.0).unwrap() - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn tie_rules() {
        let t = example_tree();
        let label = a1_label(&t);
        // A and A1 tie at 0.6
        let s = ScoreVector::new(vec![0.6, 0.2, 0.6, 0.3, 0.1, 0.1]).unwrap();
        let hard = ht_loss(&t, &s, &label, WeightScheme::None, Aggregation::Hard).unwrap();
        assert_eq!(hard.grad_scores[2], 0.0);
        assert!(hard.grad_scores[0] < 0.0);

        let smooth = ht_loss(&t, &s, &label, WeightScheme::None, Aggregation::Smooth { beta: 20.0 }).unwrap();
        // A1's term splits evenly between A and A1; A also carries its own term
        let (sm, _) = smooth_min_with_grad(&[0.6, 0.6], 20.0).unwrap();
        let (_, d) = positive_term(sm, 0.0);
        assert!((smooth.grad_scores[2] - 0.5 * d).abs() < 1e-12);
    }

    #[test]
    fn smooth_mode_rejects_bad_beta() {
        let t = example_tree();
        let err = ht_loss(&t, &example_scores(), &a1_label(&t), WeightScheme::None, Aggregation::Smooth { beta: -1.0 });
        assert_eq!(err.unwrap_err(), LossError::NonPositiveBeta(-1.0));
    }

    #[test]
    fn score_vector_validation() {
        assert_eq!(
            ScoreVector::new(vec![0.5, 1.5]).unwrap_err(),
            LossError::ScoreOutOfRange { index: 1, value: 1.5 }
        );
        assert!(ScoreVector::new(vec![f64::NAN]).is_err());
    }
}
