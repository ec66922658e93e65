//! Competency-matrix voting.
//!
//! Each client model `i` gets a row-stochastic matrix `P_i[r][c]`, the
//! probability it votes `c` when the truth is `r`. Clients estimate these on
//! their held-out split, the server blends the estimates, and prediction picks
//! the class with the largest expected benefit under the posterior.

use serde::{Deserialize, Serialize};

use super::LocalModel;
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

/// Additive smoothing applied to every confusion cell before normalizing.
pub const COMPETENCY_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetencyMatrix {
    /// `C x C`, rows sum to one.
    pub p: Tensor,
}

impl CompetencyMatrix {
    pub fn new(p: Tensor) -> Result<Self> {
        if p.shape().len() != 2 || p.shape()[0] != p.shape()[1] {
            return Err(invalid("competency matrix must be square"));
        }
        let m = Self { p };
        m.validate()?;
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.p.rows()
    }

    pub fn get(&self, truth: usize, vote: usize) -> f64 {
        self.p.get2(truth, vote) as f64
    }

    pub fn validate(&self) -> Result<()> {
        for r in 0..self.classes() {
            let row = self.p.row(r);
            if row.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(invalid("competency entries must be positive"));
            }
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(invalid(format!("competency row {r} sums to {s}")));
            }
        }
        Ok(())
    }

    fn from_rows_f64(rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = rows.len();
        let mut data = Vec::with_capacity(c * c);
        for row in rows {
            let s: f64 = row.iter().sum();
            data.extend(row.into_iter().map(|v| (v / s) as f32));
        }
        Ok(Self {
            p: Tensor::new(vec![c, c], data)?,
        })
    }
}

/// `P[r][c] = (#{truth r, vote c} + eps) / (#{truth r} + C*eps)`.
pub fn competency_from_votes(
    votes: &[usize],
    labels: &[usize],
    classes: usize,
    eps: f64,
) -> Result<CompetencyMatrix> {
    if votes.len() != labels.len() {
        return Err(invalid("votes and labels differ in length"));
    }
    let mut counts = vec![vec![0.0f64; classes]; classes];
    for (&v, &y) in votes.iter().zip(labels) {
        if v >= classes || y >= classes {
            return Err(invalid("vote or label out of range"));
        }
        counts[y][v] += 1.0;
    }
    let rows = counts
        .into_iter()
        .map(|row| {
            let n: f64 = row.iter().sum();
            row.into_iter()
                .map(|k| (k + eps) / (n + classes as f64 * eps))
                .collect()
        })
        .collect();
    CompetencyMatrix::from_rows_f64(rows)
}

/// A client's competency estimates for every ensemble member on its local
/// aggregator split, with the number of samples used.
pub fn estimate_competency(
    models: &[LocalModel],
    data: &Dataset,
    eps: f64,
) -> Result<(Vec<CompetencyMatrix>, usize)> {
    if data.is_empty() {
        return Err(invalid("competency estimation needs a non-empty split"));
    }
    let mats = models
        .iter()
        .map(|m| {
            let votes = m.predict(&data.features)?;
            competency_from_votes(&votes, &data.labels, data.num_classes, eps)
        })
        .collect::<Result<_>>()?;
    Ok((mats, data.len()))
}

/// Blend per-client estimates, weighting each client by its sample count, and
/// renormalize rows.
pub fn aggregate_competency(
    contributions: &[(Vec<CompetencyMatrix>, usize)],
) -> Result<Vec<CompetencyMatrix>> {
    let (first, _) = contributions
        .first()
        .ok_or_else(|| invalid("no competency contributions"))?;
    let m = first.len();
    let c = first.first().map_or(0, CompetencyMatrix::classes);
    let total: usize = contributions.iter().map(|(_, n)| n).sum();
    let weight = |n: usize| {
        if total == 0 {
            1.0 / contributions.len() as f64
        } else {
            n as f64 / total as f64
        }
    };
    (0..m)
        .map(|i| {
            let mut rows = vec![vec![0.0f64; c]; c];
            for (mats, n) in contributions {
                if mats.len() != m || mats[i].classes() != c {
                    return Err(invalid("competency contributions disagree in shape"));
                }
                let w = weight(*n);
                for (r, row) in rows.iter_mut().enumerate() {
                    for (k, v) in row.iter_mut().enumerate() {
                        *v += w * mats[i].get(r, k);
                    }
                }
            }
            CompetencyMatrix::from_rows_f64(rows)
        })
        .collect()
}

/// Relative gap below which two decision scores are treated as equal.
pub const VOTE_TIE_TOL: f64 = 1e-12;

/// Expected-utility decision given one vote per client.
///
/// With `benefit = None` the 0/1 benefit is used and the decision reduces to
/// `argmax_c log prior(c) + sum_i log P_i[c][vote_i]`. Otherwise the posterior
/// over the truth is formed and `argmax_c sum_r benefit[c][r] * post(r)` is
/// returned. Ties go to the lowest class.
pub fn agg_vote(
    votes: &[usize],
    competency: &[CompetencyMatrix],
    prior: &[f64],
    benefit: Option<&Tensor>,
) -> Result<usize> {
    if votes.len() != competency.len() {
        return Err(invalid("one competency matrix per vote required"));
    }
    let c = prior.len();
    if c == 0 {
        return Err(invalid("empty prior"));
    }
    if votes.iter().any(|&v| v >= c) {
        return Err(invalid("vote out of range"));
    }
    let log_post: Vec<f64> = (0..c)
        .map(|r| {
            prior[r].ln()
                + votes
                    .iter()
                    .zip(competency)
                    .map(|(&v, p)| p.get(r, v).ln())
                    .sum::<f64>()
        })
        .collect();
    let scores = match benefit {
        None => log_post,
        Some(b) => {
            b.check_shape("agg_vote(benefit)", &[c, c])?;
            let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = w.iter().sum();
            (0..c)
                .map(|choice| (0..c).map(|r| b.get2(choice, r) as f64 * w[r] / s).sum())
                .collect()
        }
    };
    // scores within VOTE_TIE_TOL (relative) count as tied; the lower class wins
    let mut best = 0;
    for k in 1..c {
        if scores[k] - scores[best] > VOTE_TIE_TOL * scores[best].abs().max(1.0) {
            best = k;
        }
    }
    Ok(best)
}

pub fn uniform_prior(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[f32]]) -> CompetencyMatrix {
        CompetencyMatrix::new(
            Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_model_is_near_identity() {
        let labels = [0, 1, 2, 1, 0, 2];
        let p = competency_from_votes(&labels, &labels, 3, COMPETENCY_EPS).unwrap();
        for r in 0..3 {
            assert!(p.get(r, r) > 0.99);
            let s: f64 = (0..3).map(|k| p.get(r, k)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_model_has_one_hot_column() {
        let labels = [0, 1, 2, 1, 0, 2];
        let p = competency_from_votes(&[1; 6], &labels, 3, COMPETENCY_EPS).unwrap();
        for r in 0..3 {
            assert!(p.get(r, 1) > 0.99);
        }
    }

    #[test]
    fn aggregate_blends_by_count() {
        let a = cm(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let b = cm(&[&[0.5, 0.5], &[0.6, 0.4]]);
        let one = aggregate_competency(&[(vec![a.clone()], 7)]).unwrap();
        assert_eq!(one[0], a);
        let eq = aggregate_competency(&[(vec![a.clone()], 5), (vec![b.clone()], 5)]).unwrap();
        assert!((eq[0].get(0, 0) - 0.7).abs() < 1e-6);
        let w = aggregate_competency(&[(vec![a], 3), (vec![b], 1)]).unwrap();
        // 0.75 * 0.9 + 0.25 * 0.5 = 0.8 ; 0.75 * 0.2 + 0.25 * 0.6 = 0.3
        assert!((w[0].get(0, 0) - 0.8).abs() < 1e-6);
        assert!((w[0].get(1, 0) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn two_voter_hand_example() {
        let p1 = cm(&[&[0.9, 0.1], &[0.1, 0.9]]);
        let p2 = cm(&[&[0.6, 0.4], &[0.4, 0.6]]);
        // posterior ∝ (0.9*0.4, 0.1*0.6) = (0.36, 0.06)
        let c = agg_vote(&[0, 1], &[p1, p2], &uniform_prior(2), None).unwrap();
        assert_eq!(c, 0);
    }

    #[test]
    fn single_voter_is_followed() {
        let p = competency_from_votes(&[0, 1, 2], &[0, 1, 2], 3, COMPETENCY_EPS).unwrap();
        for v in 0..3 {
            assert_eq!(agg_vote(&[v], &[p.clone()], &uniform_prior(3), None).unwrap(), v);
        }
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let p = cm(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(agg_vote(&[1], &[p], &uniform_prior(2), None).unwrap(), 0);
    }
}
