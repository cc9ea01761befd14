//! Run configuration, read from a TOML file.
//!
//! ```toml
//! methods = ["ours-math", "ours-nonmath", "ours-mixed", "cka", "interlace", "random"]
//! budgets = [0.10, 0.25, 0.40]
//! alpha = 0.7
//! seeds = [0]
//! out_dir = "out"
//!
//! [model]
//! num_layers = 12
//! hidden_dim = 64
//! num_heads = 4
//! vocab_size = 64
//! max_seq_len = 64
//! seed = 0
//!
//! [probes]          # capture probes, one count per subtask
//! math = [20, 20, 20, 20, 20]
//! nonmath = [20, 20, 20, 20]
//! seed = 0
//!
//! [eval]            # fidelity probes, regenerated per sweep seed
//! math = [4, 4, 4, 4, 4]
//! nonmath = [5, 5, 5, 5]
//! ```
//!
//! Every key is optional; missing keys take the defaults shown.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{check_protected, Method};
use crate::scoring::DEFAULT_ALPHA;
use crate::taxonomy::Domain;
use crate::toymodel::ToyModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeCounts {
    pub math: Vec<usize>,
    pub nonmath: Vec<usize>,
    pub seed: u64,
}

impl ProbeCounts {
    pub fn uniform(math: usize, nonmath: usize, seed: u64) -> Self {
        Self {
            math: vec![math; 5],
            nonmath: vec![nonmath; 4],
            seed,
        }
    }

    pub fn for_domain(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::Math => &self.math,
            Domain::Nonmath => &self.nonmath,
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        for d in Domain::ALL {
            let counts = self.for_domain(d);
            let field = format!("{section}.{d}");
            if counts.len() != d.subtasks().len() {
                return Err(Error::config(
                    field,
                    format!(
                        "expected {} per-subtask counts, got {}",
                        d.subtasks().len(),
                        counts.len()
                    ),
                ));
            }
            if counts.contains(&0) {
                return Err(Error::config(field, "counts must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for ProbeCounts {
    /// 100 math and 80 non-math samples, the 5:4 domain ratio.
    fn default() -> Self {
        Self::uniform(20, 20, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCounts {
    pub math: Vec<usize>,
    pub nonmath: Vec<usize>,
}

impl Default for EvalCounts {
    fn default() -> Self {
        Self {
            math: vec![4; 5],
            nonmath: vec![5; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub budgets: Vec<f64>,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Defaults to the first and last layer.
    pub protected: Option<BTreeSet<usize>>,
    /// Worker threads for sweeps; 0 lets the pool decide.
    pub jobs: usize,
    pub model: ToyModelConfig,
    pub probes: ProbeCounts,
    pub eval: EvalCounts,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            budgets: vec![0.10, 0.25, 0.40],
            alpha: DEFAULT_ALPHA,
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            protected: None,
            jobs: 0,
            model: ToyModelConfig::default(),
            probes: ProbeCounts::default(),
            eval: EvalCounts::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn protected_layers(&self) -> BTreeSet<usize> {
        self.protected.clone().unwrap_or_else(|| self.model.protected_layers())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.probes.validate("probes")?;
        let eval = ProbeCounts {
            math: self.eval.math.clone(),
            nonmath: self.eval.nonmath.clone(),
            seed: 0,
        };
        eval.validate("eval")?;
        if self.methods.is_empty() {
            return Err(Error::NoMethods);
        }
        if let Some(b) = self.budgets.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::config("budgets", format!("{b} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        check_protected(self.model.num_layers, &self.protected_layers())
            .map_err(|e| Error::config("protected", e.to_string()))?;
        Ok(())
    }
}
