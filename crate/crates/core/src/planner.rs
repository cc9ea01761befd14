//! Budgeted prune plans.
//!
//! A plan removes `K = ⌊p · |L_mid|⌋` layers, where `L_mid` is every layer
//! outside the protected set (by default the first and last layer).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OursMath,
    OursNonmath,
    OursMixed,
    Cka,
    Interlace,
    Random,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::OursMath,
        Method::OursNonmath,
        Method::OursMixed,
        Method::Cka,
        Method::Interlace,
        Method::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::OursMath => "ours-math",
            Method::OursNonmath => "ours-nonmath",
            Method::OursMixed => "ours-mixed",
            Method::Cka => "cka",
            Method::Interlace => "interlace",
            Method::Random => "random",
        }
    }

    /// Methods whose plan is the top-K of a score map.
    pub fn is_rank_then_truncate(self) -> bool {
        !matches!(self, Method::Interlace | Method::Random)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunePlan {
    pub method: Method,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub budget_fraction: f64,
    pub k: usize,
    pub num_layers: usize,
    pub protected: BTreeSet<usize>,
    /// Removal order: highest-priority layer first.
    pub pruned: Vec<usize>,
    #[serde(default)]
    pub scores: Option<BTreeMap<usize, f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// `⌊p · n_mid⌋`. A relative slack of 1e-9 absorbs binary rounding, so
/// `0.29 · 100` gives 29 rather than 28.
pub fn budget_k(p: f64, n_mid: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::BudgetOutOfRange(p));
    }
    let exact = p * n_mid as f64;
    Ok(((exact + 1e-9 * exact.max(1.0)).floor() as usize).min(n_mid))
}

/// Layers in `[0, num_layers)` outside `protected`.
pub fn pruneable_layers(num_layers: usize, protected: &BTreeSet<usize>) -> BTreeSet<usize> {
    (0..num_layers).filter(|l| !protected.contains(l)).collect()
}

/// Descending by score, ties to the higher layer index.
pub fn compare_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(b.0.cmp(&a.0))
}

/// Layers of `scores` in prune order.
pub fn prune_order(scores: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = scores.iter().map(|(&l, &s)| (l, s)).collect();
    v.sort_by(|a, b| compare_desc(*a, *b));
    v.into_iter().map(|(l, _)| l).collect()
}

pub(crate) fn check_protected(num_layers: usize, protected: &BTreeSet<usize>) -> Result<()> {
    if num_layers < 3 {
        return Err(Error::config("num_layers", "need at least 3 layers"));
    }
    if !protected.contains(&0) || !protected.contains(&(num_layers - 1)) {
        return Err(Error::config("protected", "must contain the first and last layer"));
    }
    if let Some(l) = protected.iter().find(|&&l| l >= num_layers) {
        return Err(Error::config("protected", format!("layer {l} out of range")));
    }
    Ok(())
}

/// First `K` layers of the descending score order. `scores` must cover the
/// pruneable set exactly. `alpha` and `seed` are left unset.
pub fn make_plan(
    scores: &BTreeMap<usize, f64>,
    p: f64,
    num_layers: usize,
    protected: &BTreeSet<usize>,
    method: Method,
) -> Result<PrunePlan> {
    check_protected(num_layers, protected)?;
    let mid = pruneable_layers(num_layers, protected);
    let keys: BTreeSet<usize> = scores.keys().copied().collect();
    if keys != mid {
        let missing: Vec<_> = mid.difference(&keys).collect();
        let extra: Vec<_> = keys.difference(&mid).collect();
        return Err(Error::RankingCoverageMismatch(format!(
            "missing {missing:?}, unexpected {extra:?}"
        )));
    }
    if let Some((l, _)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::RankingCoverageMismatch(format!(
            "score of layer {l} is not finite"
        )));
    }
    let k = budget_k(p, mid.len())?;
    let pruned: Vec<usize> = prune_order(scores).into_iter().take(k).collect();
    Ok(PrunePlan {
        method,
        alpha: None,
        budget_fraction: p,
        k,
        num_layers,
        protected: protected.clone(),
        pruned,
        scores: Some(scores.clone()),
        seed: None,
    })
}

impl PrunePlan {
    /// Checks every plan invariant, naming the first offending field.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let bad = |f: &str, d: String| Err((f.to_string(), d));
        let l = self.num_layers;
        if let Err(e) = check_protected(l, &self.protected) {
            return bad("protected", e.to_string());
        }
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return bad("budget_fraction", format!("{} outside [0, 1]", self.budget_fraction));
        }
        let mut seen = BTreeSet::new();
        for &p in &self.pruned {
            if p >= l {
                return bad("pruned", format!("layer {p} outside [0, {l})"));
            }
            if self.protected.contains(&p) {
                return bad("pruned", format!("layer {p} is protected"));
            }
            if !seen.insert(p) {
                return bad("pruned", format!("layer {p} listed twice"));
            }
        }
        if self.k != self.pruned.len() {
            return bad("k", format!("k = {} but {} layers pruned", self.k, self.pruned.len()));
        }
        let expected = budget_k(self.budget_fraction, l - self.protected.len()).expect("range checked");
        if self.k != expected {
            return bad("k", format!("k = {} but budget gives {expected}", self.k));
        }
        match (self.method, self.alpha) {
            (Method::OursMixed, None) => return bad("alpha", "ours-mixed requires alpha".into()),
            (Method::OursMixed, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return bad("alpha", format!("{a} outside [0, 1]"))
            }
            (m, Some(_)) if m != Method::OursMixed => {
                return bad("alpha", format!("alpha is only meaningful for ours-mixed, not {m}"))
            }
            _ => {}
        }
        match (self.method, self.seed) {
            (Method::Random, None) => return bad("seed", "random plans require a seed".into()),
            (m, Some(_)) if m != Method::Random => {
                return bad("seed", format!("seed is only meaningful for random, not {m}"))
            }
            _ => {}
        }
        if let Some(scores) = &self.scores {
            if let Some((k, s)) = scores.iter().find(|(&k, s)| k >= l || !s.is_finite()) {
                return bad("scores", format!("invalid entry {k}: {s}"));
            }
            if self.method.is_rank_then_truncate() {
                let mut ranked = Vec::with_capacity(self.pruned.len());
                for &p in &self.pruned {
                    match scores.get(&p) {
                        Some(&s) => ranked.push((p, s)),
                        None => return bad("scores", format!("no score for pruned layer {p}")),
                    }
                }
                if ranked.windows(2).any(|w| compare_desc(w[0], w[1]) != Ordering::Less) {
                    return bad("pruned", "order is not score-descending".into());
                }
            }
        }
        Ok(())
    }

    pub fn pruneable(&self) -> BTreeSet<usize> {
        pruneable_layers(self.num_layers, &self.protected)
    }
}

/// Pretty JSON with a trailing newline.
pub fn serialize_plan(plan: &PrunePlan) -> Result<Vec<u8>> {
    plan.validate().map_err(|(f, d)| Error::schema(None, f, d))?;
    let mut out = serde_json::to_vec_pretty(plan).expect("plan serializes");
    out.push(b'\n');
    Ok(out)
}

pub fn parse_plan(bytes: &[u8]) -> Result<PrunePlan> {
    let plan: PrunePlan = serde_json::from_slice(bytes).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("field"))
            .unwrap_or("plan")
            .to_string();
        Error::schema(Some(e.line()), field, msg)
    })?;
    plan.validate().map_err(|(f, d)| Error::schema(None, f, d))?;
    Ok(plan)
}
