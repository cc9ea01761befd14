//! Synthetic probe suites.
//!
//! Math subtasks emit modular-arithmetic sequences whose next tokens follow
//! from earlier ones; non-math subtasks emit surface patterns (copying,
//! listing, counting, pointing). Symbols below are mapped into the model's
//! vocabulary with `symbol % vocab_size`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Lcg};
use crate::taxonomy::{Domain, Subtask};

use super::ToyModelConfig;

/// Symbol layout of the probe language.
pub mod tokens {
    /// Arithmetic is mod this value; digits are symbols `0..MODULUS`.
    pub const MODULUS: u32 = 10;
    pub const PLUS: u32 = 10;
    pub const MINUS: u32 = 11;
    pub const EQ: u32 = 12;
    pub const SEP: u32 = 13;
    pub const THEN: u32 = 14;
    pub const TRUE: u32 = 15;
    pub const FALSE: u32 = 16;
    pub const VAR: u32 = 17;
    pub const QUERY: u32 = 18;
    pub const COMMA: u32 = 19;
    pub const COUNT: u32 = 20;
    pub const AT: u32 = 21;
    /// Word symbols occupy `WORDS_START..WORDS_END`.
    pub const WORDS_START: u32 = 24;
    pub const WORDS_END: u32 = 64;
}

use tokens::*;

const MIN_LEN: usize = 12;
const MAX_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubtaskProbes {
    pub subtask: Subtask,
    pub samples: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProbeSet {
    pub domain: Domain,
    pub seed: u64,
    pub subtasks: Vec<SubtaskProbes>,
}

impl ProbeSet {
    /// `counts[i]` samples for the domain's `i`-th subtask.
    pub fn generate(domain: Domain, counts: &[usize], seed: u64, config: &ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let subtasks = domain.subtasks();
        if counts.len() != subtasks.len() {
            return Err(Error::config(
                "counts",
                format!("{domain} has {} subtasks, got {} counts", subtasks.len(), counts.len()),
            ));
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::config(
                "counts",
                format!("count for {} must be positive", subtasks[i]),
            ));
        }
        let max_len = config.max_seq_len.min(MAX_LEN);
        let min_len = MIN_LEN.min(max_len);
        let vocab = config.vocab_size as u32;
        let subtasks = subtasks
            .iter()
            .zip(counts)
            .map(|(&subtask, &n)| {
                let mut rng = Lcg::new(derive_seed(seed, subtask.index() as u64));
                let samples = (0..n)
                    .map(|_| {
                        let len = rng.range(min_len, max_len);
                        let mut seq = template(subtask, &mut rng, len);
                        seq.truncate(len);
                        seq.iter_mut().for_each(|t| *t %= vocab);
                        seq
                    })
                    .collect();
                SubtaskProbes { subtask, samples }
            })
            .collect();
        Ok(Self { domain, seed, subtasks })
    }

    pub fn num_samples(&self) -> usize {
        self.subtasks.iter().map(|s| s.samples.len()).sum()
    }

    /// `(subtask, tokens)` in generation order.
    pub fn iter(&self) -> impl Iterator<Item = (Subtask, &[u32])> {
        self.subtasks
            .iter()
            .flat_map(|s| s.samples.iter().map(move |t| (s.subtask, t.as_slice())))
    }
}

/// Tag-based entry point; rejects unknown domain names.
pub fn generate_probes(domain: &str, counts: &[usize], seed: u64, config: &ToyModelConfig) -> Result<ProbeSet> {
    ProbeSet::generate(domain.parse()?, counts, seed, config)
}

fn digit(rng: &mut Lcg) -> u32 {
    rng.below(MODULUS as usize) as u32
}

fn word(rng: &mut Lcg, lo: u32, hi: u32) -> u32 {
    lo + rng.below((hi - lo) as usize) as u32
}

/// Emits at least `len` symbols for one sample.
fn template(subtask: Subtask, rng: &mut Lcg, len: usize) -> Vec<u32> {
    let m = MODULUS;
    let mut s = Vec::with_capacity(len + 8);
    match subtask {
        Subtask::MathCot => {
            // running sum: a + b = c THEN c + d = e THEN ...
            let mut acc = digit(rng);
            while s.len() < len {
                let b = digit(rng);
                let c = (acc + b) % m;
                s.extend([acc, PLUS, b, EQ, c, THEN]);
                acc = c;
            }
        }
        Subtask::MathDirect => {
            while s.len() < len {
                let (a, b) = (digit(rng), digit(rng));
                s.extend([a, PLUS, b, EQ, (a + b) % m, SEP]);
            }
        }
        Subtask::MathRephrase => {
            while s.len() < len {
                let (a, b) = (digit(rng), digit(rng));
                s.extend([QUERY, a, PLUS, b, SEP, QUERY, b, PLUS, a, EQ, (a + b) % m, SEP]);
            }
        }
        Subtask::MathFormalize => {
            while s.len() < len {
                let (a, c) = (digit(rng), digit(rng));
                s.extend([a, PLUS, VAR, EQ, c, SEP, VAR, EQ, (c + m - a) % m, SEP]);
            }
        }
        Subtask::MathVerify => {
            while s.len() < len {
                let (a, b) = (digit(rng), digit(rng));
                let correct = rng.below(2) == 0;
                let shown = if correct {
                    (a + b) % m
                } else {
                    (a + b + 1 + digit(rng) % (m - 1)) % m
                };
                s.extend([a, MINUS, b, EQ, shown, if correct { TRUE } else { FALSE }, SEP]);
            }
        }
        Subtask::Captioning => {
            // a short motif repeated: copy structure
            let motif_len = rng.range(3, 5);
            let motif: Vec<u32> = (0..motif_len).map(|_| word(rng, WORDS_START, WORDS_END)).collect();
            while s.len() < len {
                s.extend(&motif);
                s.push(SEP);
            }
        }
        Subtask::EntityListing => {
            let mid = (WORDS_START + WORDS_END) / 2;
            while s.len() < len {
                s.extend([word(rng, WORDS_START, mid), COMMA]);
            }
        }
        Subtask::CountingVQA => {
            while s.len() < len {
                let obj = word(rng, WORDS_START, WORDS_END);
                let n = rng.range(1, 5);
                s.extend(std::iter::repeat_n(obj, n));
                s.extend([COUNT, n as u32, SEP]);
            }
        }
        Subtask::Grounding => {
            while s.len() < len {
                let region: Vec<u32> = (0..4).map(|_| word(rng, WORDS_START, WORDS_END)).collect();
                let pick = rng.below(region.len());
                s.push(AT);
                s.extend(&region);
                s.extend([QUERY, region[pick], pick as u32, SEP]);
            }
        }
    }
    s
}
