use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthprune::actlog::{read_log, write_log, ActivationRecord, LogHeader};
use depthprune::baselines::{
    adjacent_similarity, inout_redundancy, interlace_triplets, random_select, subtask_features,
};
use depthprune::config::RunConfig;
use depthprune::evalreport::{
    capture_probes, classify_regime, eval_probes, fidelity_against, removal_pattern_grid, sweep, sweep_csv,
    PlanBuilder, Reference,
};
use depthprune::planner::{parse_plan, prune_order, serialize_plan};
use depthprune::scoring::heatmap_matrix;
use depthprune::toymodel::{capture_run_with, Model};
use depthprune::{par, Error, Execution, Method, Result};

/// Writes to stdout, ignoring a closed pipe (e.g. `| head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "depthprune",
    version,
    about = "Domain-aware layer pruning on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    budget: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the probe sets through the model and write an activation log.
    Capture {
        #[command(flatten)]
        common: Common,
    },
    /// Print per-domain raw and normalized scores for each pruneable layer.
    Score {
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print layers in prune order; with --budget also write a plan.
    Rank {
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a prune plan for --method at --budget.
    Plan {
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a plan to the configured model and report fidelity per domain.
    PruneEval {
        plan: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Full method × budget × seed sweep with CSV reports.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Write the subtask × layer mean-similarity matrix as CSV.
    Heatmap {
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Config file with flag overrides applied.
struct Settings {
    config: RunConfig,
    common: Common,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &common.method {
            config.methods = vec![m.parse()?];
        }
        if let Some(a) = common.alpha {
            config.alpha = a;
        }
        if let Some(b) = common.budget {
            config.budgets = vec![b];
        }
        if let Some(s) = common.seed {
            config.seeds = vec![s];
        }
        if let Some(o) = &common.out {
            config.out_dir = o.clone();
        }
        if let Some(j) = common.jobs {
            config.jobs = j;
        }
        config.validate()?;
        Ok(Self {
            config,
            common: common.clone(),
        })
    }

    fn method(&self) -> Result<Method> {
        match &self.common.method {
            Some(m) => m.parse(),
            None => Err(Error::UnknownMethod("none given; pass --method".into())),
        }
    }

    fn budget(&self) -> Result<f64> {
        self.common.budget.ok_or_else(|| Error::InvalidConfig {
            field: "budget".into(),
            detail: "pass --budget".into(),
        })
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.config.out_dir)?;
        Ok(self.config.out_dir.join(name))
    }
}

fn load_log(path: &Path) -> Result<(LogHeader, Vec<ActivationRecord>)> {
    let file = File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_log(file)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::SinkFailure)
}

fn builder<'a>(header: &LogHeader, records: &'a [ActivationRecord], alpha: f64) -> Result<PlanBuilder<'a>> {
    PlanBuilder::new(records, header.num_layers, header.protected_layers.clone(), alpha)
}

fn cmd_capture(s: &Settings) -> Result<()> {
    let model = Model::build(&s.config.model)?;
    let (header, records) = capture_run_with(&model, &capture_probes(&s.config)?, Execution::Parallel)?;
    let path = s.out_file("activations.jsonl")?;
    let file = File::create(&path).map_err(Error::SinkFailure)?;
    let n = write_log(&header, &records, file)?;
    say!("wrote {n} records to {}", path.display());
    Ok(())
}

fn cmd_score(s: &Settings, log: &Path) -> Result<()> {
    let (header, records) = load_log(log)?;
    let b = builder(&header, &records, s.config.alpha)?;
    let (math, nonmath) = b.score_tables()?;
    let mixed = b.scores(Method::OursMixed)?.expect("ranked method");
    let mut out = String::from("layer,math_raw,math_z,nonmath_raw,nonmath_z,mixed\n");
    for (l, z) in &math.normalized {
        let _ = writeln!(
            out,
            "{l},{},{z},{},{},{}",
            math.raw[l], nonmath.raw[l], nonmath.normalized[l], mixed[l]
        );
    }
    say!("{}", out.trim_end());
    if s.common.out.is_some() {
        write_file(&s.out_file("scores.csv")?, out.as_bytes())?;
    }
    Ok(())
}

fn plan_name(method: Method, budget: f64) -> String {
    format!("plan-{method}-{budget}.json")
}

fn write_plan(s: &Settings, b: &PlanBuilder<'_>, method: Method) -> Result<PathBuf> {
    let budget = s.budget()?;
    let plan = b.plan(method, budget, s.common.seed)?;
    let path = s.out_file(&plan_name(method, budget))?;
    write_file(&path, &serialize_plan(&plan)?)?;
    Ok(path)
}

fn cmd_rank(s: &Settings, log: &Path) -> Result<()> {
    let method = s.method()?;
    let (header, records) = load_log(log)?;
    let b = builder(&header, &records, s.config.alpha)?;
    match method {
        Method::Random => {
            let seed = s.common.seed.ok_or(Error::MissingSeed)?;
            let mid = b.pruneable();
            for l in random_select(&mid, mid.len(), seed)? {
                say!("{l}");
            }
        }
        Method::Interlace => {
            let adjacent = adjacent_similarity(&subtask_features(&records)?)?;
            let inout = inout_redundancy(&records)?;
            say!("start,score,removal,anchor");
            for t in interlace_triplets(&adjacent, &inout, &b.pruneable(), header.num_layers) {
                say!("{},{},{},{}", t.start, t.score, t.removal, t.anchor);
            }
        }
        _ => {
            let scores = b.scores(method)?.expect("ranked method");
            for l in prune_order(&scores) {
                say!("{l} {}", scores[&l]);
            }
        }
    }
    if s.common.budget.is_some() {
        let path = write_plan(s, &b, method)?;
        say!("wrote plan to {}", path.display());
    }
    Ok(())
}

fn cmd_plan(s: &Settings, log: &Path) -> Result<()> {
    let method = s.method()?;
    let (header, records) = load_log(log)?;
    let b = builder(&header, &records, s.config.alpha)?;
    let path = write_plan(s, &b, method)?;
    say!("wrote plan to {}", path.display());
    Ok(())
}

fn cmd_prune_eval(s: &Settings, plan_path: &Path) -> Result<()> {
    let bytes =
        fs::read(plan_path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", plan_path.display())))?;
    let plan = parse_plan(&bytes)?;
    let model = Model::build(&s.config.model)?;
    let pruned = model.apply_prune_plan(&plan)?;
    let seed = s.config.seeds[0];
    let regime = classify_regime(plan.budget_fraction)?;
    let mut out =
        String::from("method,budget,regime,domain,seed,top1_agreement,final_hidden_cosine,mean_kl,num_probes\n");
    for probes in eval_probes(&s.config, seed)? {
        let reference = Reference::compute(&model, &probes, Execution::Parallel)?;
        let f = fidelity_against(&reference, &pruned, &probes)?;
        let _ = writeln!(
            out,
            "{},{},{},{},{seed},{},{},{},{}",
            plan.method,
            plan.budget_fraction,
            regime.as_str(),
            probes.domain,
            f.top1_agreement,
            f.final_hidden_cosine,
            f.mean_kl,
            f.num_probes
        );
    }
    say!("{}", out.trim_end());
    if s.common.out.is_some() {
        write_file(&s.out_file("prune_eval.csv")?, out.as_bytes())?;
    }
    Ok(())
}

fn cmd_sweep(s: &Settings) -> Result<()> {
    let out = sweep(&s.config, Execution::Parallel)?;
    let files = [
        ("sweep.csv", sweep_csv(&out.rows)),
        ("removal_pattern.csv", removal_pattern_grid(&out.plans)?.to_csv()),
        ("heatmap.csv", out.heatmap.to_csv()),
    ];
    for (name, body) in files {
        let path = s.out_file(name)?;
        write_file(&path, body.as_bytes())?;
        say!("wrote {}", path.display());
    }
    say!("{} sweep rows", out.rows.len());
    Ok(())
}

fn cmd_heatmap(s: &Settings, log: &Path) -> Result<()> {
    let (_, records) = load_log(log)?;
    let csv = heatmap_matrix(&records)?.to_csv();
    if s.common.out.is_some() {
        let path = s.out_file("heatmap.csv")?;
        write_file(&path, csv.as_bytes())?;
        say!("wrote {}", path.display());
    } else {
        say!("{}", csv.trim_end());
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    let common = match &command {
        Command::Capture { common }
        | Command::Score { common, .. }
        | Command::Rank { common, .. }
        | Command::Plan { common, .. }
        | Command::PruneEval { common, .. }
        | Command::Sweep { common }
        | Command::Heatmap { common, .. } => common.clone(),
    };
    let s = Settings::load(&common)?;
    par::with_jobs(s.config.jobs, || match &command {
        Command::Capture { .. } => cmd_capture(&s),
        Command::Score { log, .. } => cmd_score(&s, log),
        Command::Rank { log, .. } => cmd_rank(&s, log),
        Command::Plan { log, .. } => cmd_plan(&s, log),
        Command::PruneEval { plan, .. } => cmd_prune_eval(&s, plan),
        Command::Sweep { .. } => cmd_sweep(&s),
        Command::Heatmap { log, .. } => cmd_heatmap(&s, log),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
