//! Domain-aware redundancy scores.
//!
//! Per domain, each pruneable layer's score is the mean in/out cosine over
//! every sample of that domain (subtasks merged, one vote per sample). The
//! scores are then z-normalized across the pruneable layers and, for the
//! mixed ranking, blended as `alpha · nonmath + (1 - alpha) · math`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::actlog::ActivationRecord;
use crate::error::{Error, Result};
use crate::planner::prune_order;
use crate::taxonomy::{Domain, Subtask};

/// Added to the standard deviation before dividing.
pub const EPSILON: f64 = 1e-8;
/// Weight on the non-math scores in the mixed ranking.
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainScoreTable {
    pub domain: Domain,
    pub raw: BTreeMap<usize, f64>,
    pub mu: f64,
    pub sigma: f64,
    pub epsilon: f64,
    /// Empty until [`znormalize`] runs.
    pub normalized: BTreeMap<usize, f64>,
    pub sample_count: usize,
}

impl DomainScoreTable {
    /// Layers by normalized score, most redundant first.
    pub fn order(&self) -> Vec<usize> {
        prune_order(&self.normalized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedRanking {
    pub alpha: f64,
    pub scores: BTreeMap<usize, f64>,
    /// Descending score, ties to the deeper layer.
    pub order: Vec<usize>,
}

/// Mean sim per pruneable layer over all samples of `domain`.
pub fn aggregate_domain(
    records: &[ActivationRecord],
    domain: Domain,
    pruneable: &BTreeSet<usize>,
) -> Result<DomainScoreTable> {
    let mut sums: BTreeMap<usize, (f64, usize)> = pruneable.iter().map(|&l| (l, (0.0, 0))).collect();
    let mut samples = HashSet::new();
    for r in records.iter().filter(|r| r.domain == domain) {
        samples.insert(r.sample_id);
        if let Some((s, n)) = sums.get_mut(&r.layer) {
            *s += r.sim;
            *n += 1;
        }
    }
    let n_d = samples.len();
    if n_d == 0 {
        return Err(Error::EmptyDomain(domain.to_string()));
    }
    let mut raw = BTreeMap::new();
    for (l, (s, n)) in sums {
        if n != n_d {
            return Err(Error::MissingLayerCoverage(l));
        }
        raw.insert(l, s / n_d as f64);
    }
    Ok(DomainScoreTable {
        domain,
        raw,
        mu: 0.0,
        sigma: 0.0,
        epsilon: EPSILON,
        normalized: BTreeMap::new(),
        sample_count: n_d,
    })
}

/// Fills `mu`, `sigma` (population) and `normalized`. Identical raw scores
/// give `sigma = 0` and all-zero normalized scores.
pub fn znormalize(mut table: DomainScoreTable) -> DomainScoreTable {
    let n = table.raw.len();
    table.epsilon = EPSILON;
    if n == 0 {
        table.normalized.clear();
        return table;
    }
    let first = *table.raw.values().next().expect("n > 0");
    if table.raw.values().all(|&v| v == first) {
        table.mu = first;
        table.sigma = 0.0;
        table.normalized = table.raw.keys().map(|&l| (l, 0.0)).collect();
        return table;
    }
    let mu = table.raw.values().sum::<f64>() / n as f64;
    let var = table.raw.values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    table.mu = mu;
    table.sigma = sigma;
    table.normalized = table
        .raw
        .iter()
        .map(|(&l, &v)| (l, (v - mu) / (sigma + EPSILON)))
        .collect();
    table
}

/// Aggregated and normalized tables for both domains.
pub fn score_tables(
    records: &[ActivationRecord],
    pruneable: &BTreeSet<usize>,
) -> Result<(DomainScoreTable, DomainScoreTable)> {
    let math = znormalize(aggregate_domain(records, Domain::Math, pruneable)?);
    let nonmath = znormalize(aggregate_domain(records, Domain::Nonmath, pruneable)?);
    Ok((math, nonmath))
}

pub fn mixed_ranking(math: &DomainScoreTable, nonmath: &DomainScoreTable, alpha: f64) -> Result<MixedRanking> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let keys = |t: &DomainScoreTable| t.normalized.keys().copied().collect::<Vec<_>>();
    if keys(math) != keys(nonmath) || math.normalized.len() != math.raw.len() {
        return Err(Error::LayerSetMismatch);
    }
    let scores: BTreeMap<usize, f64> = math
        .normalized
        .iter()
        .map(|(&l, &m)| (l, alpha * nonmath.normalized[&l] + (1.0 - alpha) * m))
        .collect();
    Ok(MixedRanking {
        alpha,
        order: prune_order(&scores),
        scores,
    })
}

/// Mean sim per `(subtask, layer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub subtasks: Vec<Subtask>,
    pub layers: Vec<usize>,
    /// `values[s][j]` for `subtasks[s]` at `layers[j]`; `None` when no record.
    pub values: Vec<Vec<Option<f64>>>,
    /// Samples behind each cell.
    pub counts: Vec<Vec<usize>>,
}

pub fn heatmap_matrix(records: &[ActivationRecord]) -> Result<Heatmap> {
    if records.is_empty() {
        return Err(Error::EmptyInput("heatmap needs at least one record"));
    }
    let subtasks: Vec<Subtask> = records
        .iter()
        .map(|r| r.subtask)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let layers: Vec<usize> = records
        .iter()
        .map(|r| r.layer)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut sums = vec![vec![0.0; layers.len()]; subtasks.len()];
    let mut counts = vec![vec![0usize; layers.len()]; subtasks.len()];
    for r in records {
        let s = subtasks.binary_search(&r.subtask).expect("collected");
        let l = layers.binary_search(&r.layer).expect("collected");
        sums[s][l] += r.sim;
        counts[s][l] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(row, c)| {
            row.iter()
                .zip(c)
                .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
                .collect()
        })
        .collect();
    Ok(Heatmap {
        subtasks,
        layers,
        values,
        counts,
    })
}

impl Heatmap {
    /// `subtask,layer_0,...` then one row per subtask; empty cells for
    /// missing combinations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subtask");
        for l in &self.layers {
            let _ = write!(out, ",layer_{l}");
        }
        out.push('\n');
        for (s, row) in self.subtasks.iter().zip(&self.values) {
            out.push_str(s.as_str());
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(sample_id: u64, layer: usize, subtask: Subtask, sim: f64) -> ActivationRecord {
        ActivationRecord {
            sample_id,
            layer,
            domain: subtask.domain(),
            subtask,
            sim,
            pooled_in: vec![1.0],
            pooled_out: vec![1.0],
        }
    }

    fn table(raw: &[f64]) -> DomainScoreTable {
        DomainScoreTable {
            domain: Domain::Math,
            raw: raw.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect(),
            mu: 0.0,
            sigma: 0.0,
            epsilon: EPSILON,
            normalized: BTreeMap::new(),
            sample_count: 1,
        }
    }

    #[test]
    fn aggregate_examples() {
        let mid: BTreeSet<usize> = [1].into();
        let single = [rec(0, 1, Subtask::MathCot, 0.37)];
        assert_eq!(aggregate_domain(&single, Domain::Math, &mid).unwrap().raw[&1], 0.37);

        let three = [
            rec(0, 1, Subtask::MathCot, 0.2),
            rec(1, 1, Subtask::MathDirect, 0.4),
            rec(2, 1, Subtask::MathVerify, 0.6),
        ];
        let t = aggregate_domain(&three, Domain::Math, &mid).unwrap();
        assert!((t.raw[&1] - 0.4).abs() < 1e-15);
        assert_eq!(t.sample_count, 3);
    }

    #[test]
    fn aggregate_errors() {
        let recs = [rec(0, 1, Subtask::MathCot, 0.2), rec(0, 2, Subtask::MathCot, 0.2)];
        assert!(matches!(
            aggregate_domain(&recs, Domain::Nonmath, &[1].into()),
            Err(Error::EmptyDomain(_))
        ));
        assert!(matches!(
            aggregate_domain(&recs, Domain::Math, &[1, 2, 3].into()),
            Err(Error::MissingLayerCoverage(3))
        ));
        let partial = [
            rec(0, 1, Subtask::MathCot, 0.2),
            rec(0, 2, Subtask::MathCot, 0.2),
            rec(1, 1, Subtask::MathCot, 0.2),
        ];
        assert!(matches!(
            aggregate_domain(&partial, Domain::Math, &[1, 2].into()),
            Err(Error::MissingLayerCoverage(2))
        ));
    }

    #[test]
    fn znormalize_examples() {
        let flat = znormalize(table(&[0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]));
        assert_eq!(flat.sigma, 0.0);
        assert!(flat.normalized.values().all(|&v| v == 0.0));

        // mean 2, population variance 2/3, so ±1/sqrt(2/3) = ±1.2247449
        let t = znormalize(table(&[1.0, 2.0, 3.0]));
        let got: Vec<f64> = t.normalized.values().copied().collect();
        for (g, e) in got.iter().zip([-1.224745, 0.0, 1.224745]) {
            assert!((g - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn mixed_examples() {
        let mut m = table(&[0.0]);
        m.normalized = [(1, -1.0)].into();
        let mut nm = table(&[0.0]);
        nm.normalized = [(1, 1.0)].into();
        nm.domain = Domain::Nonmath;
        let r = mixed_ranking(&m, &nm, 0.7).unwrap();
        assert!((r.scores[&1] - 0.4).abs() < 1e-12);
        assert!(matches!(mixed_ranking(&m, &nm, 1.5), Err(Error::AlphaOutOfRange(_))));

        let other = znormalize(table(&[0.1, 0.2]));
        assert!(matches!(mixed_ranking(&m, &other, 0.5), Err(Error::LayerSetMismatch)));
    }

    #[test]
    fn heatmap_examples() {
        let one = heatmap_matrix(&[rec(0, 3, Subtask::Grounding, 0.25)]).unwrap();
        assert_eq!(one.values, vec![vec![Some(0.25)]]);
        assert_eq!(one.to_csv(), "subtask,layer_3\nGrounding,0.25\n");
        assert!(matches!(heatmap_matrix(&[]), Err(Error::EmptyInput(_))));

        let recs = [
            rec(0, 1, Subtask::MathCot, 0.2),
            rec(1, 1, Subtask::MathCot, 0.4),
            rec(2, 1, Subtask::MathVerify, 0.9),
            rec(0, 2, Subtask::MathCot, 0.5),
            rec(1, 2, Subtask::MathCot, 0.5),
            rec(2, 2, Subtask::MathVerify, 0.8),
        ];
        let h = heatmap_matrix(&recs).unwrap();
        let agg = aggregate_domain(&recs, Domain::Math, &[1, 2].into()).unwrap();
        for (j, l) in h.layers.iter().enumerate() {
            let (mut num, mut den) = (0.0, 0);
            for s in 0..h.subtasks.len() {
                num += h.values[s][j].unwrap() * h.counts[s][j] as f64;
                den += h.counts[s][j];
            }
            assert!((num / den as f64 - agg.raw[l]).abs() < 1e-12);
        }
    }

    fn raw_scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 3..16).prop_filter("spread", |v| {
            let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            hi - lo > 0.05
        })
    }

    proptest! {
        #[test]
        fn affine_invariance(raw in raw_scores(), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let a = znormalize(table(&raw));
            let moved: Vec<f64> = raw.iter().map(|v| v * scale + shift).collect();
            let b = znormalize(table(&moved));
            prop_assert_eq!(a.order(), b.order());
            for (x, y) in a.normalized.values().zip(b.normalized.values()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn monotone_substitution(m in raw_scores(), alpha in 0.0f64..=1.0, pick in 0usize..100) {
            let n = m.len();
            let nm: Vec<f64> = m.iter().rev().copied().collect();
            let pick = pick % n;
            let top = |v: &[f64]| {
                let mut v = v.to_vec();
                v[pick] = v.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
                v
            };
            let mt = znormalize(table(&top(&m)));
            let mut nmt = znormalize(table(&top(&nm)));
            nmt.domain = Domain::Nonmath;
            let r = mixed_ranking(&mt, &nmt, alpha).unwrap();
            prop_assert_eq!(r.order[0], pick + 1);
        }
    }
}
