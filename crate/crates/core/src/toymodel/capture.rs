use std::collections::BTreeSet;

use crate::actlog::{ActivationRecord, DomainEntry, LogHeader, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::math::cosine_slices;
use crate::par::{self, Execution};
use crate::taxonomy::{Domain, Subtask};

use super::{Model, ProbeSet};

/// Runs every probe through `model` and records, per retained layer, the
/// token-averaged in/out cosine and the token-mean-pooled input and output.
///
/// Sample ids are assigned in probe order starting at 0. Records come back
/// sorted by `(sample_id, layer)` regardless of how work was scheduled.
pub fn capture_run(model: &Model, probes: &[ProbeSet]) -> Result<(LogHeader, Vec<ActivationRecord>)> {
    capture_run_with(model, probes, Execution::Parallel)
}

pub fn capture_run_with(
    model: &Model,
    probes: &[ProbeSet],
    exec: Execution,
) -> Result<(LogHeader, Vec<ActivationRecord>)> {
    let cfg = model.config();
    let mut seen = BTreeSet::new();
    for p in probes {
        if !seen.insert(p.domain) {
            return Err(Error::config("probes", format!("domain `{}` given twice", p.domain)));
        }
    }
    let header = LogHeader {
        schema_version: SCHEMA_VERSION,
        model_id: cfg.model_id(),
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
        protected_layers: cfg.protected_layers(),
        domains: probes
            .iter()
            .map(|p| DomainEntry {
                domain: p.domain,
                subtasks: p.subtasks.iter().map(|s| s.subtask).collect(),
                sample_count: p.num_samples(),
            })
            .collect(),
    };

    let jobs: Vec<(u64, Domain, Subtask, &[u32])> = probes
        .iter()
        .flat_map(|p| p.iter().map(move |(s, t)| (p.domain, s, t)))
        .enumerate()
        .map(|(i, (d, s, t))| (i as u64, d, s, t))
        .collect();

    let per_sample = par::map(exec, &jobs, |&(id, domain, subtask, tokens)| {
        capture_sample(model, id, domain, subtask, tokens)
    });
    let mut records = Vec::with_capacity(jobs.len() * model.depth());
    for r in per_sample {
        records.extend(r?);
    }
    Ok((header, records))
}

fn capture_sample(
    model: &Model,
    sample_id: u64,
    domain: Domain,
    subtask: Subtask,
    tokens: &[u32],
) -> Result<Vec<ActivationRecord>> {
    let d = model.config().hidden_dim;
    let t = tokens.len() as f64;
    let mut out = Vec::with_capacity(model.depth());
    model.forward_hooked(tokens, |layer, input, output| {
        let mut sim = 0.0;
        for (a, b) in input.chunks_exact(d).zip(output.chunks_exact(d)) {
            sim += cosine_slices(a, b)?;
        }
        out.push(ActivationRecord {
            sample_id,
            layer,
            domain,
            subtask,
            sim: (sim / t).clamp(-1.0, 1.0),
            pooled_in: pool(input, d),
            pooled_out: pool(output, d),
        });
        Ok(())
    })?;
    Ok(out)
}

fn pool(x: &[f64], d: usize) -> Vec<f32> {
    let rows = (x.len() / d) as f64;
    let mut acc = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.into_iter().map(|a| (a / rows) as f32).collect()
}
