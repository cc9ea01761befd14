mod common;

use std::collections::BTreeSet;

use depthprune::actlog::{read_log, write_log};
use depthprune::baselines::{cka_rank, subtask_features};
use depthprune::config::{ProbeCounts, RunConfig};
use depthprune::evalreport::{fidelity, removal_pattern_grid, sweep, PlanBuilder};
use depthprune::planner::{parse_plan, serialize_plan};
use depthprune::toymodel::{capture_run, Model, ProbeSet, ToyModelConfig};
use depthprune::{Domain, Error, Execution, Method};

fn small() -> ToyModelConfig {
    ToyModelConfig {
        num_layers: 8,
        hidden_dim: 32,
        ..ToyModelConfig::default()
    }
}

fn probes(cfg: &ToyModelConfig, n: usize, seed: u64) -> [ProbeSet; 2] {
    [
        ProbeSet::generate(Domain::Math, &[n; 5], seed, cfg).unwrap(),
        ProbeSet::generate(Domain::Nonmath, &[n; 4], seed, cfg).unwrap(),
    ]
}

#[test]
fn capture_log_plan_prune_round_trip() {
    let cfg = small();
    let model = Model::build(&cfg).unwrap();
    let (header, records) = capture_run(&model, &probes(&cfg, 3, 0)).unwrap();

    let mut buf = Vec::new();
    let n = write_log(&header, &records, &mut buf).unwrap();
    assert_eq!(n, records.len());
    let (h2, r2) = read_log(buf.as_slice()).unwrap();
    assert_eq!(h2, header);
    assert_eq!(r2, records);

    let builder = PlanBuilder::new(&r2, cfg.num_layers, cfg.protected_layers(), 0.7).unwrap();
    for m in Method::ALL {
        let plan = builder.plan(m, 0.4, Some(3)).unwrap();
        let bytes = serialize_plan(&plan).unwrap();
        assert_eq!(parse_plan(&bytes).unwrap(), plan);
        let pruned = model.apply_prune_plan(&plan).unwrap();
        assert_eq!(pruned.depth(), cfg.num_layers - plan.k);
        let f = fidelity(&model, &pruned, &probes(&cfg, 1, 9)[0]).unwrap();
        assert!((0.0..=1.0).contains(&f.top1_agreement));
        assert!(f.mean_kl >= 0.0);
    }
}

#[test]
fn random_without_seed_is_rejected() {
    let cfg = small();
    let (_, records) = capture_run(&Model::build(&cfg).unwrap(), &probes(&cfg, 1, 0)).unwrap();
    let builder = PlanBuilder::new(&records, cfg.num_layers, cfg.protected_layers(), 0.7).unwrap();
    assert!(matches!(
        builder.plan(Method::Random, 0.25, None),
        Err(Error::MissingSeed)
    ));
}

#[test]
fn cka_agrees_with_gram_oracle_on_captured_features() {
    let cfg = small();
    let (_, records) = capture_run(&Model::build(&cfg).unwrap(), &probes(&cfg, 2, 4)).unwrap();
    let features = subtask_features(&records).unwrap();
    let mid: BTreeSet<usize> = (1..cfg.num_layers - 1).collect();
    let table = cka_rank(&records, &mid).unwrap();
    for &l in &mid {
        let want = common::hsic_cka(&features[&(l - 1)], &features[&l]);
        assert!((table.redundancy[&l] - want).abs() < 1e-10, "layer {l}");
    }
}

#[test]
fn pruning_a_plan_twice_is_rejected() {
    let cfg = small();
    let model = Model::build(&cfg).unwrap();
    let (_, records) = capture_run(&model, &probes(&cfg, 1, 0)).unwrap();
    let plan = PlanBuilder::new(&records, cfg.num_layers, cfg.protected_layers(), 0.7)
        .unwrap()
        .plan(Method::Cka, 0.25, None)
        .unwrap();
    let once = model.apply_prune_plan(&plan).unwrap();
    assert!(matches!(once.apply_prune_plan(&plan), Err(Error::PlanModelMismatch(_))));
}

/// Unembedding rows are drawn iid, so over random weight draws each model's
/// argmax is uniform on the vocabulary and two independent models agree with
/// probability `1/V`. A single pair need not sit at `1/V` (its argmax
/// marginals are uneven), so the rate is averaged over many seed pairs and
/// compared within 3 standard errors of that average.
#[test]
fn unrelated_models_agree_at_chance() {
    let cfg = ToyModelConfig::default();
    let mut rates = Vec::new();
    let mut positions = 0;
    for pair in 0..40u64 {
        let a = Model::build(&ToyModelConfig {
            seed: 2 * pair + 100,
            ..cfg.clone()
        })
        .unwrap();
        let b = Model::build(&ToyModelConfig {
            seed: 2 * pair + 101,
            ..cfg.clone()
        })
        .unwrap();
        let (mut agree, mut n) = (0.0, 0usize);
        for set in &probes(&cfg, 2, pair) {
            let f = fidelity(&a, &b, set).unwrap();
            agree += f.top1_agreement * f.num_positions as f64;
            n += f.num_positions;
        }
        positions += n;
        rates.push(agree / n as f64);
    }
    assert!(positions >= 2000, "{positions} positions");
    let (mean, sd) = common::mean_sd(&rates);
    let se = sd / (rates.len() as f64 - 1.0).sqrt();
    let chance = 1.0 / cfg.vocab_size as f64;
    assert!(
        (mean - chance).abs() <= 3.0 * se,
        "mean {mean}, chance {chance}, 3 SE {}",
        3.0 * se
    );
}

#[test]
fn sweep_rows_cover_every_cell_in_order() {
    let cfg = RunConfig {
        methods: vec![Method::Random, Method::OursMixed],
        budgets: vec![0.4, 0.1],
        seeds: vec![2, 1],
        model: small(),
        probes: ProbeCounts::uniform(2, 2, 0),
        ..RunConfig::default()
    };
    let out = sweep(&cfg, Execution::Sequential).unwrap();
    assert_eq!(out.rows.len(), 2 * 2 * 2 * 2);
    let keys: Vec<_> = out
        .rows
        .iter()
        .map(|r| (r.method.as_str(), r.budget, r.domain.as_str(), r.seed))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
    assert_eq!(keys[0], ("ours-mixed", 0.1, "math", 1));

    let grid = removal_pattern_grid(&out.plans).unwrap();
    assert_eq!(grid.rows.len(), 4);
    assert_eq!(out.heatmap.layers, (0..8).collect::<Vec<_>>());
}
