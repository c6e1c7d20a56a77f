//! Temporal memory: a PCFG over event labels learned by plain inside-outside
//! EM, an episodic store of observed event strings, and the two completion
//! predictors built on them.

use std::cmp::Ordering;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::cnf::{self, Cnf, SplitWeights, START};
use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::persist::{self, Versioned};
use crate::spatial::converged;

pub const DEFAULT_NONTERMINALS: usize = 6;
pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPcfg {
    seed: u64,
    alphabet: Vec<String>,
    cnf: Cnf,
}

impl TemporalPcfg {
    pub fn init(k: usize, alphabet: Vec<String>, seed: u64) -> Result<Self> {
        check_alphabet(&alphabet)?;
        Ok(TemporalPcfg {
            seed,
            cnf: Cnf::random(k, alphabet.len(), seed)?,
            alphabet,
        })
    }

    pub fn from_parts(
        k: usize,
        alphabet: Vec<String>,
        seed: u64,
        binary: Vec<f64>,
        emissions: Vec<f64>,
    ) -> Result<Self> {
        check_alphabet(&alphabet)?;
        Ok(TemporalPcfg {
            seed,
            cnf: Cnf::from_parts(k, alphabet.len(), binary, emissions)?,
            alphabet,
        })
    }

    pub fn k(&self) -> usize {
        self.cnf.nonterminals()
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cnf(&self) -> &Cnf {
        &self.cnf
    }

    pub fn normalization_error(&self) -> f64 {
        self.cnf.normalization_error()
    }

    pub fn encode<S: AsRef<str>>(&self, seq: &[S]) -> Result<Vec<usize>> {
        seq.iter()
            .map(|label| {
                let label = label.as_ref();
                self.alphabet
                    .iter()
                    .position(|a| a == label)
                    .ok_or_else(|| {
                        Error::Argument(format!("label {label} is not in the temporal alphabet"))
                    })
            })
            .collect()
    }

    /// Inside probability of the exact string.
    pub fn sequence_probability<S: AsRef<str>>(&self, seq: &[S]) -> Result<f64> {
        if seq.is_empty() {
            return Err(Error::Argument("empty event sequence".into()));
        }
        let encoded = self.encode(seq)?;
        Ok(self
            .log_probability_encoded(&self.cnf.log_tables(), &encoded)
            .exp())
    }

    fn log_probability_encoded(&self, lg: &cnf::LogCnf, seq: &[usize]) -> f64 {
        cnf::inside(lg, seq, &SplitWeights::neutral(seq.len())).root()
    }

    /// Total probability of all strings of each length `1..=max_len`
    /// (`result[l - 1]`), from an inside pass with marginalized emissions.
    pub fn length_mass(&self, max_len: usize) -> Vec<f64> {
        let lg = self.cnf.log_tables();
        let leaf: Vec<f64> = (0..self.k())
            .map(|i| {
                (0..self.alphabet.len())
                    .map(|t| self.cnf.emission(i, t))
                    .sum::<f64>()
                    .ln()
            })
            .collect();
        (1..=max_len)
            .map(|len| {
                cnf::inside_with(&lg, len, &SplitWeights::neutral(len), |_, i| leaf[i])
                    .root()
                    .exp()
            })
            .collect()
    }
}

fn check_alphabet(alphabet: &[String]) -> Result<()> {
    if alphabet.is_empty() {
        return Err(Error::Argument("temporal alphabet is empty".into()));
    }
    for (pos, label) in alphabet.iter().enumerate() {
        if alphabet[..pos].contains(label) {
            return Err(Error::Argument(format!(
                "duplicate label {label} in alphabet"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub nonterminals: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            nonterminals: DEFAULT_NONTERMINALS,
            seed: crate::spatial::DEFAULT_SEED,
            max_iters: crate::spatial::DEFAULT_MAX_ITERS,
            tol: crate::spatial::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemporalTraining {
    pub pcfg: TemporalPcfg,
    pub log_likelihoods: Vec<f64>,
}

/// One plain EM iteration; returns the updated grammar and the corpus
/// log-likelihood before the update.
pub fn temporal_em_step(pcfg: &TemporalPcfg, corpus: &[Vec<usize>]) -> Result<(TemporalPcfg, f64)> {
    let batch: Vec<(Vec<usize>, SplitWeights)> = corpus
        .iter()
        .map(|s| (s.clone(), SplitWeights::neutral(s.len())))
        .collect();
    let (cnf, ll) = cnf::em_step(&pcfg.cnf, &batch, false).map_err(|idx| Error::Degenerate {
        origin: format!("event sequence {idx}"),
    })?;
    Ok((
        TemporalPcfg {
            seed: pcfg.seed,
            alphabet: pcfg.alphabet.clone(),
            cnf,
        },
        ll,
    ))
}

pub fn learn_temporal_pcfg(
    corpus: &[EventSequence],
    alphabet: &[String],
    cfg: &TemporalConfig,
) -> Result<TemporalTraining> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty event corpus".into()));
    }
    let mut pcfg = TemporalPcfg::init(cfg.nonterminals, alphabet.to_vec(), cfg.seed)?;
    let mut encoded = Vec::with_capacity(corpus.len());
    for seq in corpus {
        if seq.labels.is_empty() {
            return Err(Error::Argument(format!(
                "episode {} has no events",
                seq.episode_id
            )));
        }
        encoded.push(pcfg.encode(&seq.labels)?);
    }
    let mut log_likelihoods = Vec::new();
    for _ in 0..cfg.max_iters {
        let (next, ll) = temporal_em_step(&pcfg, &encoded)?;
        debug_assert!(next.normalization_error() < 1e-12);
        pcfg = next;
        log_likelihoods.push(ll);
        if let [.., prev, cur] = log_likelihoods[..] {
            if converged(prev, cur, cfg.tol) {
                break;
            }
        }
    }
    Ok(TemporalTraining {
        pcfg,
        log_likelihoods,
    })
}

#[derive(Serialize, Deserialize)]
struct PcfgFile {
    format_version: u32,
    k: usize,
    alphabet: Vec<String>,
    seed: u64,
    binary_rules: Vec<f64>,
    emissions: Vec<f64>,
}

impl Versioned for PcfgFile {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

impl TemporalPcfg {
    pub fn to_json(&self) -> String {
        persist::to_json(&PcfgFile {
            format_version: persist::FORMAT_VERSION,
            k: self.k(),
            alphabet: self.alphabet.clone(),
            seed: self.seed,
            binary_rules: self.cnf.binary_rules().to_vec(),
            emissions: self.cnf.emissions().to_vec(),
        })
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let f: PcfgFile = persist::from_json(text, context)?;
        TemporalPcfg::from_parts(f.k, f.alphabet, f.seed, f.binary_rules, f.emissions)
    }
}

/// Every distinct compressed event string seen so far, with its count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodicStore {
    episodes: IndexMap<Vec<String>, usize>,
}

impl EpisodicStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn count<S: AsRef<str>>(&self, seq: &[S]) -> usize {
        let key: Vec<String> = seq.iter().map(|s| s.as_ref().to_string()).collect();
        self.episodes.get(&key).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[String], usize)> {
        self.episodes.iter().map(|(k, &c)| (k.as_slice(), c))
    }

    pub fn store_episode(&mut self, seq: &EventSequence) -> Result<()> {
        if let Some(w) = seq.labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Argument(format!(
                "episode {} repeats label {} consecutively; compress it first",
                seq.episode_id, w[0]
            )));
        }
        *self.episodes.entry(seq.labels.clone()).or_insert(0) += 1;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    format_version: u32,
    episodes: Vec<StoreEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoreEntry {
    sequence: Vec<String>,
    count: usize,
}

impl Versioned for StoreFile {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

impl EpisodicStore {
    pub fn to_json(&self) -> String {
        persist::to_json(&StoreFile {
            format_version: persist::FORMAT_VERSION,
            episodes: self
                .episodes
                .iter()
                .map(|(sequence, &count)| StoreEntry {
                    sequence: sequence.clone(),
                    count,
                })
                .collect(),
        })
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let file: StoreFile = persist::from_json(text, context)?;
        let mut store = EpisodicStore::new();
        for entry in file.episodes {
            if entry.count == 0 || entry.sequence.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!(
                    "{context}: invalid episodic entry {:?} x{}",
                    entry.sequence, entry.count
                )));
            }
            if store.episodes.insert(entry.sequence, entry.count).is_some() {
                return Err(Error::Validation(format!(
                    "{context}: duplicate episodic entry"
                )));
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pcfg,
    Episodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub labels: Vec<String>,
    pub score: f64,
}

/// Ranked completions, score descending then labels ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub source: Source,
    pub completions: Vec<Completion>,
}

impl Prediction {
    pub fn empty(source: Source) -> Self {
        Prediction {
            source,
            completions: Vec::new(),
        }
    }
}

fn rank(a: &Completion, b: &Completion) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.cmp(&b.labels))
}

fn common_prefix<S: AsRef<str>>(a: &[String], b: &[S]) -> usize {
    a.iter()
        .zip(b)
        .take_while(|(x, y)| x.as_str() == y.as_ref())
        .count()
}

/// Completes `prefix` from the stored episodes sharing the longest common
/// prefix with it. Each candidate's score is its count over the total count
/// of that equally matched group; weaker matches are not returned.
pub fn predict_episodic<S: AsRef<str>>(
    store: &EpisodicStore,
    prefix: &[S],
    top_k: usize,
) -> Prediction {
    let matched: Vec<(usize, &[String], usize)> = store
        .iter()
        .map(|(seq, count)| (common_prefix(seq, prefix), seq, count))
        .collect();
    let Some(best) = matched.iter().map(|m| m.0).max() else {
        return Prediction::empty(Source::Episodic);
    };
    let tier: Vec<_> = matched.into_iter().filter(|m| m.0 == best).collect();
    let total: usize = tier.iter().map(|m| m.2).sum();
    let mut completions: Vec<Completion> = tier
        .into_iter()
        .map(|(lcp, seq, count)| Completion {
            labels: seq[lcp..].to_vec(),
            score: count as f64 / total as f64,
        })
        .collect();
    completions.sort_by(rank);
    completions.truncate(top_k);
    Prediction {
        source: Source::Episodic,
        completions,
    }
}

/// Number of strings with the given prefix and total length at most `max_len`.
pub fn enumeration_size(alphabet: usize, prefix_len: usize, max_len: usize) -> u128 {
    let mut total: u128 = 0;
    let mut block: u128 = 1;
    for len in prefix_len..=max_len {
        if len >= 1 {
            total = total.saturating_add(block);
        }
        block = block.saturating_mul(alphabet as u128);
    }
    total
}

/// Scores every string that extends `prefix` up to `max_len` labels with the
/// inside algorithm and ranks the extensions by probability conditioned on
/// the prefix. Zero-probability extensions are dropped.
pub fn predict_pcfg<S: AsRef<str>>(
    pcfg: &TemporalPcfg,
    prefix: &[S],
    max_len: usize,
    top_k: usize,
    budget: u64,
) -> Result<Prediction> {
    if max_len < prefix.len() {
        return Err(Error::Argument(format!(
            "max_len {max_len} is shorter than the prefix ({} events)",
            prefix.len()
        )));
    }
    let a = pcfg.alphabet.len();
    let needed = enumeration_size(a, prefix.len(), max_len);
    if needed > budget as u128 {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let prefix = pcfg.encode(prefix)?;
    let lg = pcfg.cnf.log_tables();

    let mut scored: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut total = 0.0;
    let mut suffix: Vec<usize> = Vec::new();
    let mut seq = prefix.clone();
    loop {
        if !seq.is_empty() {
            let p = pcfg.log_probability_encoded(&lg, &seq).exp();
            total += p;
            if p > 0.0 {
                scored.push((suffix.clone(), p));
            }
        }
        // next suffix in length-then-odometer order
        if seq.len() < max_len {
            suffix.push(0);
        } else {
            loop {
                match suffix.last_mut() {
                    None => {
                        return Ok(finish(pcfg, scored, total, top_k));
                    }
                    Some(last) if *last + 1 < a => {
                        *last += 1;
                        break;
                    }
                    Some(_) => {
                        suffix.pop();
                    }
                }
            }
        }
        seq.truncate(prefix.len());
        seq.extend_from_slice(&suffix);
    }
}

fn finish(
    pcfg: &TemporalPcfg,
    scored: Vec<(Vec<usize>, f64)>,
    total: f64,
    top_k: usize,
) -> Prediction {
    if total <= 0.0 {
        return Prediction::empty(Source::Pcfg);
    }
    let mut completions: Vec<Completion> = scored
        .into_iter()
        .map(|(suffix, p)| Completion {
            labels: suffix.iter().map(|&t| pcfg.alphabet[t].clone()).collect(),
            score: p / total,
        })
        .collect();
    completions.sort_by(rank);
    completions.truncate(top_k);
    Prediction {
        source: Source::Pcfg,
        completions,
    }
}

/// `P(start -> label)`: the probability of a one-event episode.
pub fn start_emission(pcfg: &TemporalPcfg, label: &str) -> Result<f64> {
    let t = pcfg.encode(&[label])?[0];
    Ok(pcfg.cnf.emission(START, t))
}
