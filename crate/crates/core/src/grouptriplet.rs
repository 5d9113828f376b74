//! Group-aware triplet mining and the group tree triplet (GTT) loss.
//!
//! Anchor and positive share a supergroup (the parent of their leaves), the
//! negative comes from a different supergroup. Each triplet carries a dynamic
//! margin `m = m_eps + 0.5 * m_sigma` where `m_sigma` is the tree-distance gap
//! between the negative and the positive, normalized by `2H`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{LabelTree, NodeId, TreeError};

/// Default intra-class tolerance of the dynamic margin.
pub const DEFAULT_M_EPS: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TripletError {
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine distance of an all-zero vector")]
    ZeroVector,
    #[error("sample index {index} out of range for {len} embeddings")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("embedding must have at least 2 finite entries")]
    InvalidEmbedding,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, TripletError> {
        if values.len() < 2 || values.iter().any(|x| !x.is_finite()) {
            return Err(TripletError::InvalidEmbedding);
        }
        Ok(Embedding(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMeasure {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin {
    pub m: f64,
    pub m_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor_idx: usize,
    pub pos_idx: usize,
    pub neg_idx: usize,
    pub anchor_leaf: NodeId,
    pub pos_leaf: NodeId,
    pub neg_leaf: NodeId,
    pub margin: f64,
}

/// Dynamic margin for an (anchor, positive, negative) leaf triple.
pub fn dynamic_margin(
    tree: &LabelTree,
    anchor: NodeId,
    pos: NodeId,
    neg: NodeId,
    m_eps: f64,
) -> Result<Margin, TripletError> {
    let ga = tree.supergroup(anchor)?;
    let gp = tree.supergroup(pos)?;
    let gn = tree.supergroup(neg)?;
    if ga != gp {
        return Err(TripletError::InvalidTriplet(
            "anchor and positive belong to different supergroups".into(),
        ));
    }
    if ga == gn {
        return Err(TripletError::InvalidTriplet(
            "anchor and negative share a supergroup".into(),
        ));
    }
    let d_pos = tree.tree_distance(anchor, pos)?;
    let d_neg = tree.tree_distance(anchor, neg)?;
    if d_pos >= d_neg {
        return Err(TripletError::InvalidTriplet(format!(
            "distance to positive ({d_pos}) is not below distance to negative ({d_neg})"
        )));
    }
    let m_sigma = (d_neg - d_pos) as f64 / (2 * tree.height()) as f64;
    Ok(Margin { m: m_eps + 0.5 * m_sigma, m_sigma })
}

/// Mines one triplet per usable anchor of the batch.
///
/// For anchor `i` the positive is drawn uniformly among the other samples of
/// the same supergroup (the same leaf is allowed) and the negative uniformly
/// among samples of any other supergroup. Anchors lacking either are skipped.
pub fn mine_triplets(
    tree: &LabelTree,
    batch_leaves: &[NodeId],
    m_eps: f64,
    seed: u64,
) -> Result<Vec<Triplet>, TripletError> {
    let groups: Vec<NodeId> = batch_leaves
        .iter()
        .map(|&l| tree.supergroup(l))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &g) in groups.iter().enumerate() {
        pos.clear();
        neg.clear();
        for (j, &h) in groups.iter().enumerate() {
            if h == g {
                if j != i {
                    pos.push(j);
                }
            } else {
                neg.push(j);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let p = pos[rng.random_range(0..pos.len())];
        let n = neg[rng.random_range(0..neg.len())];
        let margin = dynamic_margin(tree, batch_leaves[i], batch_leaves[p], batch_leaves[n], m_eps)?;
        out.push(Triplet {
            anchor_idx: i,
            pos_idx: p,
            neg_idx: n,
            anchor_leaf: batch_leaves[i],
            pos_leaf: batch_leaves[p],
            neg_leaf: batch_leaves[n],
            margin: margin.m,
        });
    }
    Ok(out)
}

pub fn pair_distance(a: &Embedding, b: &Embedding, measure: DistanceMeasure) -> Result<f64, TripletError> {
    distance_with_grad(a.as_slice(), b.as_slice(), measure).map(|(d, _, _)| d)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// distance plus its gradients in a and b
fn distance_with_grad(
    a: &[f64],
    b: &[f64],
    measure: DistanceMeasure,
) -> Result<(f64, Vec<f64>, Vec<f64>), TripletError> {
    if a.len() != b.len() {
        return Err(TripletError::DimensionMismatch(a.len(), b.len()));
    }
    match measure {
        DistanceMeasure::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(TripletError::ZeroVector);
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let cos = dot / (na * nb);
            // d = 1 - <â, b̂>;  dd/da = -(b̂ - cos â) / |a|
            let ga = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(y / nb - cos * x / na) / na)
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(x / na - cos * y / nb) / nb)
                .collect();
            Ok((1.0 - cos, ga, gb))
        }
        DistanceMeasure::Euclidean => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let d = norm(&diff);
            if d == 0.0 {
                let zero = vec![0.0; a.len()];
                return Ok((0.0, zero.clone(), zero));
            }
            let ga: Vec<f64> = diff.iter().map(|x| x / d).collect();
            let gb = ga.iter().map(|x| -x).collect();
            Ok((d, ga, gb))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossResult {
    pub value: f64,
    /// d loss / d embedding, one row per embedding.
    pub grad: Vec<Vec<f64>>,
    pub active: usize,
}

/// Mean hinge `max(d(a,p) - d(a,n) + m, 0)` over the mined triplets.
pub fn gtt_loss(
    embeddings: &[Embedding],
    triplets: &[Triplet],
    measure: DistanceMeasure,
) -> Result<TripletLossResult, TripletError> {
    let len = embeddings.len();
    let mut grad: Vec<Vec<f64>> = embeddings.iter().map(|e| vec![0.0; e.dim()]).collect();
    if triplets.is_empty() {
        return Ok(TripletLossResult { value: 0.0, grad, active: 0 });
    }
    for t in triplets {
        for index in [t.anchor_idx, t.pos_idx, t.neg_idx] {
            if index >= len {
                return Err(TripletError::IndexOutOfRange { index, len });
            }
        }
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut value = 0.0;
    let mut active = 0;
    for t in triplets {
        let a = embeddings[t.anchor_idx].as_slice();
        let (d_ap, ga_p, gp) = distance_with_grad(a, embeddings[t.pos_idx].as_slice(), measure)?;
        let (d_an, ga_n, gn) = distance_with_grad(a, embeddings[t.neg_idx].as_slice(), measure)?;
        let slack = d_ap - d_an + t.margin;
        if slack <= 0.0 {
            continue;
        }
        active += 1;
        value += slack;
        for k in 0..a.len() {
            grad[t.anchor_idx][k] += scale * (ga_p[k] - ga_n[k]);
            grad[t.pos_idx][k] += scale * gp[k];
            grad[t.neg_idx][k] -= scale * gn[k];
        }
    }
    Ok(TripletLossResult { value: value * scale, grad, active })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced() -> LabelTree {
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

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn margin_examples() {
        let t = balanced();
        let id = |n| t.id(n).unwrap();
        let m = dynamic_margin(&t, id("A1"), id("A2"), id("B1"), 0.15).unwrap();
        assert_eq!(m.m_sigma, 0.5);
        assert!((m.m - 0.40).abs() < 1e-15);

        let same = dynamic_margin(&t, id("A1"), id("A1"), id("B2"), 0.15).unwrap();
        assert_eq!(same.m_sigma, 1.0);
        assert!((same.m - 0.65).abs() < 1e-15);
    }

    #[test]
    fn margin_rejects_bad_groups() {
        let t = balanced();
        let id = |n| t.id(n).unwrap();
        assert!(matches!(
            dynamic_margin(&t, id("A1"), id("B1"), id("B2"), 0.15),
            Err(TripletError::InvalidTriplet(_))
        ));
        assert!(matches!(
            dynamic_margin(&t, id("A1"), id("A2"), id("A2"), 0.15),
            Err(TripletError::InvalidTriplet(_))
        ));
        assert!(matches!(
            dynamic_margin(&t, id("A"), id("A2"), id("B2"), 0.15),
            Err(TripletError::Tree(TreeError::NotALeaf(_)))
        ));
    }

    #[test]
    fn mining_examples() {
        let t = balanced();
        let leaves: Vec<NodeId> = ["A1", "A2", "B1", "B2"].iter().map(|n| t.id(n).unwrap()).collect();
        let trip = mine_triplets(&t, &leaves, 0.15, 3).unwrap();
        assert_eq!(trip.len(), 4);
        assert!(trip.iter().all(|x| (x.margin - 0.40).abs() < 1e-15));

        let one_group = vec![t.id("A1").unwrap(), t.id("A2").unwrap(), t.id("A1").unwrap()];
        assert!(mine_triplets(&t, &one_group, 0.15, 3).unwrap().is_empty());
        assert!(mine_triplets(&t, &leaves[..1], 0.15, 3).unwrap().is_empty());
        assert_eq!(mine_triplets(&t, &leaves, 0.15, 9), mine_triplets(&t, &leaves, 0.15, 9));
    }

    #[test]
    fn distances() {
        let a = emb(&[0.3, -1.2, 2.0]);
        assert!(pair_distance(&a, &a, DistanceMeasure::Cosine).unwrap().abs() < 1e-15);
        let d = pair_distance(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0]), DistanceMeasure::Cosine).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        let e = pair_distance(&emb(&[1.0, 0.0]), &emb(&[0.0, 3.0]), DistanceMeasure::Euclidean).unwrap();
        assert!((e - 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            pair_distance(&emb(&[0.0, 0.0]), &a, DistanceMeasure::Euclidean),
            Err(TripletError::DimensionMismatch(2, 3))
        );
        assert_eq!(
            pair_distance(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0]), DistanceMeasure::Cosine),
            Err(TripletError::ZeroVector)
        );
        assert!(Embedding::new(vec![1.0]).is_err());
    }

    fn triplet(margin: f64) -> Triplet {
        Triplet {
            anchor_idx: 0,
            pos_idx: 1,
            neg_idx: 2,
            anchor_leaf: NodeId(3),
            pos_leaf: NodeId(4),
            neg_leaf: NodeId(5),
            margin,
        }
    }

    // embeddings on a line: d(a,p) = dp, d(a,n) = dn under Euclidean distance
    fn line(dp: f64, dn: f64) -> Vec<Embedding> {
        vec![emb(&[0.0, 0.0]), emb(&[dp, 0.0]), emb(&[-dn, 0.0])]
    }

    #[test]
    fn hinge_values() {
        let sat = gtt_loss(&line(0.1, 0.6), &[triplet(0.4)], DistanceMeasure::Euclidean).unwrap();
        assert_eq!(sat.value, 0.0);
        assert!(sat.grad.iter().flatten().all(|g| *g == 0.0));

        let act = gtt_loss(&line(0.5, 0.2), &[triplet(0.4)], DistanceMeasure::Euclidean).unwrap();
        assert!((act.value - 0.7).abs() < 1e-12);
        assert_eq!(act.active, 1);

        let none = gtt_loss(&line(0.5, 0.2), &[], DistanceMeasure::Euclidean).unwrap();
        assert_eq!(none.value, 0.0);
        assert!(none.grad.iter().flatten().all(|g| *g == 0.0));

        let mut bad = triplet(0.4);
        bad.neg_idx = 7;
        assert_eq!(
            gtt_loss(&line(0.5, 0.2), &[bad], DistanceMeasure::Euclidean).unwrap_err(),
            TripletError::IndexOutOfRange { index: 7, len: 3 }
        );
    }
}
