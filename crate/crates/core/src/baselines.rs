//! Comparison rankers: linear CKA between adjacent layers, Interlace
//! triplet selection, and seeded random removal.
//!
//! CKA and Interlace both work on nine pseudo-samples per layer: the mean
//! pooled output of each probing subtask, stacked in canonical subtask
//! order into a `9 × d` feature matrix.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::actlog::ActivationRecord;
use crate::error::{Error, Result};
use crate::math::{center_rows, cosine_slices, frobenius_inner, RealMatrix};
use crate::planner::{budget_k, check_protected, compare_desc, make_plan, pruneable_layers, Method, PrunePlan};
use crate::rng::Lcg;
use crate::taxonomy::Subtask;

/// Per-layer `9 × d` matrices of subtask-mean pooled outputs, for every
/// layer that appears in `records`.
pub fn subtask_features(records: &[ActivationRecord]) -> Result<BTreeMap<usize, RealMatrix>> {
    let mut acc: BTreeMap<usize, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
    for r in records {
        let d = r.pooled_out.len();
        let rows = acc
            .entry(r.layer)
            .or_insert_with(|| vec![(vec![0.0; d], 0); Subtask::ALL.len()]);
        let (sum, n) = &mut rows[r.subtask.index()];
        if sum.len() != d {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                got: d,
            });
        }
        for (s, &x) in sum.iter_mut().zip(&r.pooled_out) {
            *s += x as f64;
        }
        *n += 1;
    }
    acc.into_iter()
        .map(|(layer, rows)| {
            let mut means = Vec::with_capacity(rows.len());
            for (subtask, (sum, n)) in Subtask::ALL.iter().zip(rows) {
                if n == 0 {
                    return Err(Error::MissingSubtask {
                        subtask: subtask.to_string(),
                        layer,
                    });
                }
                means.push(sum.into_iter().map(|s| s / n as f64).collect::<Vec<_>>());
            }
            Ok((layer, RealMatrix::from_rows(&means)?))
        })
        .collect()
}

/// Mean over the nine subtasks of each subtask's mean stored in/out sim.
pub fn inout_redundancy(records: &[ActivationRecord]) -> Result<BTreeMap<usize, f64>> {
    let mut acc: BTreeMap<usize, [(f64, usize); 9]> = BTreeMap::new();
    for r in records {
        let cell = &mut acc.entry(r.layer).or_insert([(0.0, 0); 9])[r.subtask.index()];
        cell.0 += r.sim;
        cell.1 += 1;
    }
    acc.into_iter()
        .map(|(layer, cells)| {
            let mut total = 0.0;
            for (subtask, (s, n)) in Subtask::ALL.iter().zip(cells) {
                if n == 0 {
                    return Err(Error::MissingSubtask {
                        subtask: subtask.to_string(),
                        layer,
                    });
                }
                total += s / n as f64;
            }
            Ok((layer, total / 9.0))
        })
        .collect()
}

/// Linear CKA after column-centering both matrices, computed in feature
/// space: `‖X̃ᵀỸ‖²_F / (‖X̃ᵀX̃‖_F ‖ỸᵀỸ‖_F)`. `None` when either centered
/// matrix is zero.
pub fn linear_cka(x: &RealMatrix, y: &RealMatrix) -> Result<Option<f64>> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.rows(),
        });
    }
    let xc = center_rows(x);
    let yc = center_rows(y);
    if xc.frobenius_norm() < crate::math::ZERO_NORM || yc.frobenius_norm() < crate::math::ZERO_NORM {
        return Ok(None);
    }
    let xy = xc.t_matmul(&yc)?;
    let xx = xc.t_matmul(&xc)?;
    let yy = yc.t_matmul(&yc)?;
    let num = frobenius_inner(&xy, &xy);
    let den = xx.frobenius_norm() * yy.frobenius_norm();
    Ok(Some((num / den).clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaTable {
    #[serde(skip)]
    pub features: BTreeMap<usize, RealMatrix>,
    /// `ℓ → CKA(X_ℓ, X_{ℓ+1})`.
    pub adjacency: BTreeMap<usize, f64>,
    /// Pruneable `ℓ → CKA(X_{ℓ-1}, X_ℓ)`: how redundant `ℓ` is given its
    /// predecessor.
    pub redundancy: BTreeMap<usize, f64>,
    /// Layers whose redundancy was forced to 0 because a centered feature
    /// matrix vanished.
    pub degenerate: BTreeSet<usize>,
}

impl CkaTable {
    pub fn order(&self) -> Vec<usize> {
        crate::planner::prune_order(&self.redundancy)
    }
}

pub fn cka_rank(records: &[ActivationRecord], pruneable: &BTreeSet<usize>) -> Result<CkaTable> {
    let features = subtask_features(records)?;
    let mut adjacency = BTreeMap::new();
    let mut degenerate = BTreeSet::new();
    for (&l, x) in &features {
        if let Some(y) = features.get(&(l + 1)) {
            match linear_cka(x, y)? {
                Some(c) => {
                    adjacency.insert(l, c);
                }
                None => {
                    adjacency.insert(l, 0.0);
                    degenerate.insert(l + 1);
                }
            }
        }
    }
    let mut redundancy = BTreeMap::new();
    for &l in pruneable {
        let prev = l.checked_sub(1).and_then(|p| adjacency.get(&p));
        match prev {
            Some(&c) => {
                redundancy.insert(l, c);
            }
            None => {
                let missing = if features.contains_key(&l) {
                    l.saturating_sub(1)
                } else {
                    l
                };
                return Err(Error::MissingLayerCoverage(missing));
            }
        }
    }
    degenerate.retain(|l| pruneable.contains(l));
    Ok(CkaTable {
        features,
        adjacency,
        redundancy,
        degenerate,
    })
}

pub fn cka_plan(
    records: &[ActivationRecord],
    num_layers: usize,
    protected: &BTreeSet<usize>,
    p: f64,
) -> Result<PrunePlan> {
    check_protected(num_layers, protected)?;
    let table = cka_rank(records, &pruneable_layers(num_layers, protected))?;
    make_plan(&table.redundancy, p, num_layers, protected, Method::Cka)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InterlaceTriplet {
    pub start: usize,
    pub adjacent_sims: (f64, f64),
    pub score: f64,
    pub removal: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterlaceSelection {
    /// Accepted triplets in acceptance order.
    pub triplets: Vec<InterlaceTriplet>,
    /// Layers added by the spacing-constrained fill after triplets ran out.
    pub filled: Vec<usize>,
    /// All removals, triplet removals first.
    pub pruned: Vec<usize>,
}

/// Candidate triplets `(ℓ, ℓ+1, ℓ+2)`: the first two pruneable, the anchor
/// pruneable or the last layer. Sorted by score descending, then start.
pub fn interlace_triplets(
    adjacent: &BTreeMap<usize, f64>,
    inout: &BTreeMap<usize, f64>,
    pruneable: &BTreeSet<usize>,
    num_layers: usize,
) -> Vec<InterlaceTriplet> {
    let mut out: Vec<InterlaceTriplet> = pruneable
        .iter()
        .copied()
        .filter(|&l| {
            let anchor = l + 2;
            pruneable.contains(&(l + 1)) && (pruneable.contains(&anchor) || anchor + 1 == num_layers)
        })
        .filter_map(|l| {
            let s0 = *adjacent.get(&l)?;
            let s1 = *adjacent.get(&(l + 1))?;
            let r0 = inout.get(&l).copied().unwrap_or(f64::NEG_INFINITY);
            let r1 = inout.get(&(l + 1)).copied().unwrap_or(f64::NEG_INFINITY);
            Some(InterlaceTriplet {
                start: l,
                adjacent_sims: (s0, s1),
                score: (s0 + s1) / 2.0,
                removal: if r0 > r1 { l } else { l + 1 },
                anchor: l + 2,
            })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)));
    out
}

/// Greedy non-overlapping triplet selection, then a spacing-constrained fill
/// from the most in/out-redundant layers, then `BudgetInfeasible`.
///
/// `adjacent[ℓ]` is the mean cosine between layers `ℓ` and `ℓ+1`;
/// `inout[ℓ]` is layer `ℓ`'s in/out redundancy.
pub fn interlace_select(
    adjacent: &BTreeMap<usize, f64>,
    inout: &BTreeMap<usize, f64>,
    pruneable: &BTreeSet<usize>,
    num_layers: usize,
    k: usize,
) -> Result<InterlaceSelection> {
    if k > pruneable.len() {
        return Err(Error::BudgetTooLarge {
            k,
            available: pruneable.len(),
        });
    }
    let mut used = BTreeSet::new();
    let mut triplets = Vec::new();
    let mut pruned = Vec::with_capacity(k);
    for t in interlace_triplets(adjacent, inout, pruneable, num_layers) {
        if pruned.len() == k {
            break;
        }
        let members = [t.start, t.start + 1, t.anchor];
        if members.iter().any(|m| used.contains(m)) {
            continue;
        }
        used.extend(members);
        pruned.push(t.removal);
        triplets.push(t);
    }

    let anchors: BTreeSet<usize> = triplets.iter().map(|t| t.anchor).collect();
    let mut candidates: Vec<(usize, f64)> = pruneable
        .iter()
        .filter(|l| !anchors.contains(l) && !pruned.contains(l))
        .map(|&l| (l, inout.get(&l).copied().unwrap_or(f64::NEG_INFINITY)))
        .collect();
    candidates.sort_by(|a, b| compare_desc(*a, *b));
    let mut filled = Vec::new();
    for (l, _) in candidates {
        if pruned.len() == k {
            break;
        }
        if pruned.iter().all(|&p: &usize| p.abs_diff(l) >= 2) {
            pruned.push(l);
            filled.push(l);
        }
    }
    if pruned.len() < k {
        return Err(Error::BudgetInfeasible {
            k,
            supplied: pruned.len(),
        });
    }
    Ok(InterlaceSelection {
        triplets,
        filled,
        pruned,
    })
}

/// Mean over subtasks of `cos(X_ℓ[i], X_{ℓ+1}[i])`, keyed by `ℓ`.
pub fn adjacent_similarity(features: &BTreeMap<usize, RealMatrix>) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (&l, x) in features {
        if let Some(y) = features.get(&(l + 1)) {
            let mut s = 0.0;
            for (a, b) in x.row_iter().zip(y.row_iter()) {
                s += cosine_slices(a, b)?;
            }
            out.insert(l, s / x.rows() as f64);
        }
    }
    Ok(out)
}

/// Interlace plan; `scores` records the accepted triplet score for each
/// triplet removal and the in/out redundancy for each filled layer.
pub fn interlace_plan(
    records: &[ActivationRecord],
    num_layers: usize,
    protected: &BTreeSet<usize>,
    p: f64,
) -> Result<PrunePlan> {
    check_protected(num_layers, protected)?;
    let mid = pruneable_layers(num_layers, protected);
    let k = budget_k(p, mid.len())?;
    let features = subtask_features(records)?;
    let adjacent = adjacent_similarity(&features)?;
    let inout = inout_redundancy(records)?;
    let sel = interlace_select(&adjacent, &inout, &mid, num_layers, k)?;
    let mut scores: BTreeMap<usize, f64> = sel.triplets.iter().map(|t| (t.removal, t.score)).collect();
    scores.extend(sel.filled.iter().map(|&l| (l, inout[&l])));
    Ok(PrunePlan {
        method: Method::Interlace,
        alpha: None,
        budget_fraction: p,
        k,
        num_layers,
        protected: protected.clone(),
        pruned: sel.pruned,
        scores: Some(scores),
        seed: None,
    })
}

/// `k` distinct layers drawn without replacement: a partial Fisher–Yates
/// shuffle of the ascending pruneable list, swapping position `i` with
/// `i + below(n - i)` (see [`crate::rng`]).
pub fn random_select(pruneable: &BTreeSet<usize>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = pruneable.len();
    if k > n {
        return Err(Error::BudgetTooLarge { k, available: n });
    }
    let mut pool: Vec<usize> = pruneable.iter().copied().collect();
    let mut rng = Lcg::new(seed);
    for i in 0..k {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

pub fn random_plan(num_layers: usize, protected: &BTreeSet<usize>, p: f64, seed: u64) -> Result<PrunePlan> {
    check_protected(num_layers, protected)?;
    let mid = pruneable_layers(num_layers, protected);
    let k = budget_k(p, mid.len())?;
    Ok(PrunePlan {
        method: Method::Random,
        alpha: None,
        budget_fraction: p,
        k,
        num_layers,
        protected: protected.clone(),
        pruned: random_select(&mid, k, seed)?,
        scores: None,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Subtask;

    fn rec(sample_id: u64, layer: usize, subtask: Subtask, sim: f64, out: Vec<f32>) -> ActivationRecord {
        ActivationRecord {
            sample_id,
            layer,
            domain: subtask.domain(),
            subtask,
            sim,
            pooled_in: out.clone(),
            pooled_out: out,
        }
    }

    #[test]
    fn missing_subtask_is_reported() {
        let recs: Vec<_> = Subtask::ALL[..8]
            .iter()
            .enumerate()
            .map(|(i, &s)| rec(i as u64, 1, s, 0.5, vec![1.0, i as f32]))
            .collect();
        match cka_rank(&recs, &[1].into()) {
            Err(Error::MissingSubtask { subtask, layer }) => {
                assert_eq!(subtask, "Grounding");
                assert_eq!(layer, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cka_identity_and_degenerate() {
        let x = RealMatrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]).unwrap();
        assert!((linear_cka(&x, &x).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let flat = RealMatrix::from_rows(&[[1.0, 2.0]; 3]).unwrap();
        assert_eq!(linear_cka(&x, &flat).unwrap(), None);
    }

    fn uniform_inputs(n: usize) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>, BTreeSet<usize>) {
        let adjacent = (0..n - 1).map(|l| (l, 0.5)).collect();
        let inout = (0..n).map(|l| (l, 0.5)).collect();
        (adjacent, inout, (1..n - 1).collect())
    }

    #[test]
    fn interlace_single_removal() {
        let n = 8;
        let (mut adjacent, inout, mid) = uniform_inputs(n);
        adjacent.insert(3, 0.9);
        adjacent.insert(4, 0.8);
        let sel = interlace_select(&adjacent, &inout, &mid, n, 1).unwrap();
        assert_eq!(sel.triplets.len(), 1);
        let t = sel.triplets[0];
        assert_eq!(t.start, 3);
        assert!((t.score - 0.85).abs() < 1e-12);
        assert_eq!(sel.pruned, vec![4]); // tie on in/out redundancy removes ℓ+1
        assert!(!sel.pruned.contains(&t.anchor));
    }

    #[test]
    fn interlace_uniform_ties_take_earliest_start() {
        let n = 10;
        let (adjacent, inout, mid) = uniform_inputs(n);
        let a = interlace_select(&adjacent, &inout, &mid, n, 2).unwrap();
        let starts: Vec<_> = a.triplets.iter().map(|t| t.start).collect();
        assert_eq!(starts, vec![1, 4]);
        assert_eq!(a, interlace_select(&adjacent, &inout, &mid, n, 2).unwrap());
    }

    #[test]
    fn interlace_removal_prefers_more_redundant_layer() {
        let n = 6;
        let (adjacent, mut inout, mid) = uniform_inputs(n);
        inout.insert(1, 0.9);
        let sel = interlace_select(&adjacent, &inout, &mid, n, 1).unwrap();
        assert_eq!(sel.pruned, vec![1]);
    }

    #[test]
    fn interlace_fill_and_infeasible() {
        // L = 12, mid = 1..=10: at most three disjoint triplets
        let n = 12;
        let (adjacent, inout, mid) = uniform_inputs(n);
        let sel = interlace_select(&adjacent, &inout, &mid, n, 4).unwrap();
        assert_eq!(sel.triplets.len(), 3);
        assert_eq!(sel.filled.len(), 1);
        let mut p = sel.pruned.clone();
        p.sort();
        assert!(p.windows(2).all(|w| w[1] - w[0] >= 2));
        assert!(matches!(
            interlace_select(&adjacent, &inout, &mid, n, 9),
            Err(Error::BudgetInfeasible { k: 9, .. })
        ));
        assert!(matches!(
            interlace_select(&adjacent, &inout, &mid, n, 11),
            Err(Error::BudgetTooLarge { .. })
        ));
    }

    #[test]
    fn random_examples() {
        let mid: BTreeSet<usize> = (1..11).collect();
        assert_eq!(random_select(&mid, 4, 9).unwrap(), random_select(&mid, 4, 9).unwrap());
        let mut all = random_select(&mid, 10, 3).unwrap();
        all.sort();
        assert_eq!(all, mid.iter().copied().collect::<Vec<_>>());
        assert!(matches!(random_select(&mid, 11, 0), Err(Error::BudgetTooLarge { .. })));
        let plan = random_plan(12, &[0, 11].into(), 0.25, 5).unwrap();
        assert_eq!(plan.k, 2);
        assert!(plan.validate().is_ok());
    }

    #[test]
    fn random_is_uniform() {
        let mid: BTreeSet<usize> = (1..6).collect();
        let n = 10_000.0;
        let mut freq = [0.0f64; 5];
        for seed in 0..10_000u64 {
            freq[random_select(&mid, 1, seed).unwrap()[0] - 1] += 1.0;
        }
        let expected = n / 5.0;
        let sd = (n * 0.2 * 0.8f64).sqrt();
        let mut chi2 = 0.0;
        for f in freq {
            assert!((f - expected).abs() < 3.0 * sd, "{freq:?}");
            chi2 += (f - expected).powi(2) / expected;
        }
        // 99.9th percentile of chi-square with 4 degrees of freedom
        assert!(chi2 < 18.467, "chi2 = {chi2}");
    }
}
