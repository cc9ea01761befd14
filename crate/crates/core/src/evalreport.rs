//! Pruned-versus-unpruned fidelity, budget × method sweeps, regime labels
//! and the CSV reports built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::Serialize;

use crate::actlog::ActivationRecord;
use crate::baselines::{
    adjacent_similarity, cka_rank, inout_redundancy, interlace_select, random_plan, subtask_features,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::math::cosine_slices;
use crate::par::{self, Execution};
use crate::planner::{budget_k, check_protected, make_plan, pruneable_layers, Method, PrunePlan};
use crate::rng::derive_seed;
use crate::scoring::{heatmap_matrix, mixed_ranking, score_tables, DomainScoreTable, Heatmap};
use crate::taxonomy::Domain;
use crate::toymodel::{capture_run_with, ForwardOutput, Model, ProbeSet};

/// Probabilities are floored here before renormalizing for the KL term.
pub const PROB_FLOOR: f64 = 1e-12;

/// Stream tag separating evaluation probes from capture probes.
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FidelityMetrics {
    /// Fraction of positions where both models pick the same argmax token.
    pub top1_agreement: f64,
    /// Mean cosine between final residual-stream states.
    pub final_hidden_cosine: f64,
    /// Mean `KL(unpruned ‖ pruned)` over next-token distributions.
    pub mean_kl: f64,
    pub num_probes: usize,
    pub num_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub method: Method,
    pub budget_fraction: f64,
    pub domain: Domain,
    pub seed: u64,
    pub metrics: FidelityMetrics,
}

/// Unpruned outputs for a probe set, computed once and reused per plan.
#[derive(Debug, Clone)]
pub struct Reference {
    outputs: Vec<ForwardOutput>,
}

impl Reference {
    pub fn compute(base: &Model, probes: &ProbeSet, exec: Execution) -> Result<Self> {
        let seqs: Vec<&[u32]> = probes.iter().map(|(_, t)| t).collect();
        let outputs = par::map(exec, &seqs, |t| base.forward(t))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Self { outputs })
    }
}

pub fn fidelity(base: &Model, pruned: &Model, probes: &ProbeSet) -> Result<FidelityMetrics> {
    if !base.comparable_with(pruned) {
        return Err(Error::ModelMismatch("vocabulary, context or width differ".into()));
    }
    let reference = Reference::compute(base, probes, Execution::Sequential)?;
    fidelity_against(&reference, pruned, probes)
}

pub fn fidelity_against(reference: &Reference, pruned: &Model, probes: &ProbeSet) -> Result<FidelityMetrics> {
    if reference.outputs.len() != probes.num_samples() {
        return Err(Error::ModelMismatch(
            "reference was computed on different probes".into(),
        ));
    }
    if reference.outputs.is_empty() {
        return Err(Error::EmptyInput("fidelity needs at least one probe"));
    }
    let (mut agree, mut cos, mut kl, mut positions) = (0usize, 0.0, 0.0, 0usize);
    for (base, (_, tokens)) in reference.outputs.iter().zip(probes.iter()) {
        let other = pruned.forward(tokens)?;
        if other.logits.cols() != base.logits.cols() || other.final_hidden.cols() != base.final_hidden.cols() {
            return Err(Error::ModelMismatch("output shapes differ".into()));
        }
        for t in 0..tokens.len() {
            let (p, q) = (base.logits.row(t), other.logits.row(t));
            agree += usize::from(argmax(p) == argmax(q));
            kl += kl_divergence(p, q);
            cos += cosine_slices(base.final_hidden.row(t), other.final_hidden.row(t))?;
            positions += 1;
        }
    }
    let n = positions as f64;
    Ok(FidelityMetrics {
        top1_agreement: agree as f64 / n,
        final_hidden_cosine: (cos / n).clamp(-1.0, 1.0),
        mean_kl: (kl / n).max(0.0),
        num_probes: reference.outputs.len(),
        num_positions: positions,
    })
}

/// First index of the maximum.
fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn floored_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x = (*x / z).max(PROB_FLOOR));
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// `KL(softmax(p_logits) ‖ softmax(q_logits))` with floored probabilities.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let p = floored_softmax(p_logits);
    let q = floored_softmax(q_logits);
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    RankingSensitive,
    Transition,
    StructureDominated,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::RankingSensitive => "ranking-sensitive",
            Regime::Transition => "transition",
            Regime::StructureDominated => "structure-dominated",
        }
    }
}

/// `p ≤ 0.15` ranking-sensitive, `≤ 0.32` transition, above that
/// structure-dominated.
pub fn classify_regime(p: f64) -> Result<Regime> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::BudgetOutOfRange(p));
    }
    Ok(if p <= 0.15 {
        Regime::RankingSensitive
    } else if p <= 0.32 {
        Regime::Transition
    } else {
        Regime::StructureDominated
    })
}

/// Builds plans for any method from one set of capture records. Per-method
/// scores are computed on first successful use and cached.
pub struct PlanBuilder<'a> {
    records: &'a [ActivationRecord],
    num_layers: usize,
    protected: BTreeSet<usize>,
    alpha: f64,
    tables: OnceLock<(DomainScoreTable, DomainScoreTable)>,
    cka: OnceLock<BTreeMap<usize, f64>>,
    interlace: OnceLock<InterlaceInputs>,
}

/// Adjacent-layer similarity and in/out redundancy.
type InterlaceInputs = (BTreeMap<usize, f64>, BTreeMap<usize, f64>);

fn cached<T>(cell: &OnceLock<T>, init: impl FnOnce() -> Result<T>) -> Result<&T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = init()?;
    Ok(cell.get_or_init(|| v))
}

impl<'a> PlanBuilder<'a> {
    pub fn new(
        records: &'a [ActivationRecord],
        num_layers: usize,
        protected: BTreeSet<usize>,
        alpha: f64,
    ) -> Result<Self> {
        check_protected(num_layers, &protected)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        Ok(Self {
            records,
            num_layers,
            protected,
            alpha,
            tables: OnceLock::new(),
            cka: OnceLock::new(),
            interlace: OnceLock::new(),
        })
    }

    pub fn pruneable(&self) -> BTreeSet<usize> {
        pruneable_layers(self.num_layers, &self.protected)
    }

    /// `(math, nonmath)` tables.
    pub fn score_tables(&self) -> Result<&(DomainScoreTable, DomainScoreTable)> {
        cached(&self.tables, || score_tables(self.records, &self.pruneable()))
    }

    fn cka_scores(&self) -> Result<&BTreeMap<usize, f64>> {
        cached(&self.cka, || {
            cka_rank(self.records, &self.pruneable()).map(|t| t.redundancy)
        })
    }

    fn interlace_inputs(&self) -> Result<&InterlaceInputs> {
        cached(&self.interlace, || {
            let adjacent = adjacent_similarity(&subtask_features(self.records)?)?;
            Ok((adjacent, inout_redundancy(self.records)?))
        })
    }

    /// Score map a method ranks by (`None` for interlace and random).
    pub fn scores(&self, method: Method) -> Result<Option<BTreeMap<usize, f64>>> {
        Ok(match method {
            Method::OursMath => Some(self.score_tables()?.0.normalized.clone()),
            Method::OursNonmath => Some(self.score_tables()?.1.normalized.clone()),
            Method::OursMixed => {
                let (m, nm) = self.score_tables()?;
                Some(mixed_ranking(m, nm, self.alpha)?.scores)
            }
            Method::Cka => Some(self.cka_scores()?.clone()),
            Method::Interlace | Method::Random => None,
        })
    }

    pub fn plan(&self, method: Method, p: f64, seed: Option<u64>) -> Result<PrunePlan> {
        let (l, prot) = (self.num_layers, &self.protected);
        match method {
            Method::Random => random_plan(l, prot, p, seed.ok_or(Error::MissingSeed)?),
            Method::Interlace => {
                let (adjacent, inout) = self.interlace_inputs()?;
                let mid = self.pruneable();
                let k = budget_k(p, mid.len())?;
                let sel = interlace_select(adjacent, inout, &mid, l, k)?;
                let mut scores: BTreeMap<usize, f64> = sel.triplets.iter().map(|t| (t.removal, t.score)).collect();
                scores.extend(sel.filled.iter().map(|&x| (x, inout[&x])));
                Ok(PrunePlan {
                    method,
                    alpha: None,
                    budget_fraction: p,
                    k,
                    num_layers: l,
                    protected: prot.clone(),
                    pruned: sel.pruned,
                    scores: Some(scores),
                    seed: None,
                })
            }
            _ => {
                let scores = self.scores(method)?.expect("ranked method");
                let mut plan = make_plan(&scores, p, l, prot, method)?;
                if method == Method::OursMixed {
                    plan.alpha = Some(self.alpha);
                }
                Ok(plan)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub budget: f64,
    pub domain: Domain,
    pub seed: u64,
    pub top1_agreement: f64,
    pub final_hidden_cosine: f64,
    pub mean_kl: f64,
    pub num_probes: usize,
}

pub const SWEEP_HEADER: &str = "method,budget,domain,seed,top1_agreement,final_hidden_cosine,mean_kl,num_probes";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method, r.budget, r.domain, r.seed, r.top1_agreement, r.final_hidden_cosine, r.mean_kl, r.num_probes
        );
    }
    out
}

/// Everything a sweep produces.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// One plan per (method, budget); random uses the first seed.
    pub plans: Vec<PrunePlan>,
    pub heatmap: Heatmap,
    pub records: Vec<ActivationRecord>,
}

/// Evaluation probes for a sweep seed, drawn from a stream disjoint from the
/// capture probes.
pub fn eval_probes(config: &RunConfig, seed: u64) -> Result<[ProbeSet; 2]> {
    let s = derive_seed(seed, EVAL_STREAM);
    Ok([
        ProbeSet::generate(Domain::Math, &config.eval.math, s, &config.model)?,
        ProbeSet::generate(Domain::Nonmath, &config.eval.nonmath, s, &config.model)?,
    ])
}

pub fn capture_probes(config: &RunConfig) -> Result<[ProbeSet; 2]> {
    let p = &config.probes;
    Ok([
        ProbeSet::generate(Domain::Math, &p.math, p.seed, &config.model)?,
        ProbeSet::generate(Domain::Nonmath, &p.nonmath, p.seed, &config.model)?,
    ])
}

/// Runs capture, ranks with every method, and measures fidelity for every
/// `(method, budget, domain, seed)` cell. Rows are sorted by those keys.
pub fn sweep(config: &RunConfig, exec: Execution) -> Result<SweepOutput> {
    sweep_with_model(config, &Model::build(&config.model)?, exec)
}

/// Like [`sweep`] but on a caller-supplied model, e.g. one with planted
/// identity blocks.
pub fn sweep_with_model(config: &RunConfig, model: &Model, exec: Execution) -> Result<SweepOutput> {
    config.validate()?;
    let (_, records) = capture_run_with(model, &capture_probes(config)?, exec)?;
    let builder = PlanBuilder::new(
        &records,
        config.model.num_layers,
        config.protected_layers(),
        config.alpha,
    )?;

    let mut plans = BTreeMap::new();
    let mut cells = Vec::new();
    for &m in &config.methods {
        for &b in &config.budgets {
            for &s in &config.seeds {
                let seed = (m == Method::Random).then_some(s);
                let plan = match plans.get(&(m, b.to_bits(), seed)) {
                    Some(p) => p,
                    None => plans.entry((m, b.to_bits(), seed)).or_insert(builder.plan(m, b, seed)?),
                };
                cells.push((m, b, s, plan.clone()));
            }
        }
    }

    let references: BTreeMap<u64, [(ProbeSet, Reference); 2]> = config
        .seeds
        .iter()
        .map(|&s| {
            let [math, nonmath] = eval_probes(config, s)?;
            let rm = Reference::compute(model, &math, exec)?;
            let rn = Reference::compute(model, &nonmath, exec)?;
            Ok((s, [(math, rm), (nonmath, rn)]))
        })
        .collect::<Result<_>>()?;

    let evaluated = par::map(exec, &cells, |(m, b, s, plan)| -> Result<Vec<SweepRow>> {
        let pruned = model.apply_prune_plan(plan)?;
        references[s]
            .iter()
            .map(|(probes, reference)| {
                let f = fidelity_against(reference, &pruned, probes)?;
                Ok(SweepRow {
                    method: *m,
                    budget: *b,
                    domain: probes.domain,
                    seed: *s,
                    top1_agreement: f.top1_agreement,
                    final_hidden_cosine: f.final_hidden_cosine,
                    mean_kl: f.mean_kl,
                    num_probes: f.num_probes,
                })
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(cells.len() * 2);
    for r in evaluated {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        a.method
            .as_str()
            .cmp(b.method.as_str())
            .then(a.budget.total_cmp(&b.budget))
            .then(a.domain.as_str().cmp(b.domain.as_str()))
            .then(a.seed.cmp(&b.seed))
    });

    let first_seed = config.seeds[0];
    let mut grid_plans = Vec::new();
    for &m in &config.methods {
        for &b in &config.budgets {
            let seed = (m == Method::Random).then_some(first_seed);
            grid_plans.push(plans[&(m, b.to_bits(), seed)].clone());
        }
    }
    let heatmap = heatmap_matrix(&records)?;
    Ok(SweepOutput {
        rows,
        plans: grid_plans,
        heatmap,
        records,
    })
}

/// 0/1 matrix of pruned layers: a leading `protected` row marks protected
/// columns, then one row per plan.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalGrid {
    pub num_layers: usize,
    pub protected: BTreeSet<usize>,
    /// `(method, budget, cells)`.
    pub rows: Vec<(Method, f64, Vec<u8>)>,
}

pub fn removal_pattern_grid(plans: &[PrunePlan]) -> Result<RemovalGrid> {
    let Some(first) = plans.first() else {
        return Err(Error::EmptyInput("no plans"));
    };
    let l = first.num_layers;
    let mut protected = BTreeSet::new();
    let mut rows = Vec::with_capacity(plans.len());
    for p in plans {
        if p.num_layers != l {
            return Err(Error::InconsistentDepth(l, p.num_layers));
        }
        protected.extend(p.protected.iter().copied());
        let mut cells = vec![0u8; l];
        for &x in &p.pruned {
            cells[x] = 1;
        }
        rows.push((p.method, p.budget_fraction, cells));
    }
    Ok(RemovalGrid {
        num_layers: l,
        protected,
        rows,
    })
}

impl RemovalGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,budget");
        for l in 0..self.num_layers {
            let _ = write!(out, ",layer_{l}");
        }
        out.push_str("\nprotected,");
        for l in 0..self.num_layers {
            let _ = write!(out, ",{}", u8::from(self.protected.contains(&l)));
        }
        out.push('\n');
        for (m, b, cells) in &self.rows {
            let _ = write!(out, "{m},{b}");
            for c in cells {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}
