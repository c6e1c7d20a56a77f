//! Spatial grammar: a CNF transition tensor `a(i, j, k)` with terminal
//! emissions, trained by inside-outside EM in which every binary-rule
//! application is scaled by the set-wise association of the two child
//! spans, and decoded by a modulated Viterbi parser.
//!
//! Scores under modulation are not renormalized, so the "log-likelihood"
//! reported here is a weighted score rather than a probability.

use serde::{Deserialize, Serialize};

use crate::cnf::{self, Cnf, SplitWeights};
use crate::error::{Error, Result};
use crate::persist::{self, Versioned};
use crate::scenario::{
    build_association_matrix, enumerate_combinations, AssociationMatrix, Scenario, Split,
    Vocabulary, DEFAULT_LAMBDA,
};
use crate::tree::{CoverSet, ParseTree};

pub const DEFAULT_NONTERMINALS: usize = 8;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MAX_LEN: usize = 8;
pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrammar {
    seed: u64,
    cnf: Cnf,
}

impl SpatialGrammar {
    pub fn init(n: usize, v: usize, seed: u64) -> Result<SpatialGrammar> {
        Ok(SpatialGrammar {
            seed,
            cnf: Cnf::random(n, v, seed)?,
        })
    }

    pub fn from_parts(
        n: usize,
        v: usize,
        seed: u64,
        binary: Vec<f64>,
        emissions: Vec<f64>,
    ) -> Result<Self> {
        Ok(SpatialGrammar {
            seed,
            cnf: Cnf::from_parts(n, v, binary, emissions)?,
        })
    }

    pub fn n(&self) -> usize {
        self.cnf.nonterminals()
    }

    pub fn v(&self) -> usize {
        self.cnf.terminals()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cnf(&self) -> &Cnf {
        &self.cnf
    }

    /// `a(i, j, k)`, 0-based nonterminals.
    pub fn rule(&self, i: usize, j: usize, k: usize) -> f64 {
        self.cnf.rule(i, j, k)
    }

    /// `e(i, code)` for a 1-based terminal code.
    pub fn emission(&self, i: usize, code: u32) -> f64 {
        self.cnf.emission(i, code as usize - 1)
    }

    pub fn normalization_error(&self) -> f64 {
        self.cnf.normalization_error()
    }
}

/// Mean pairwise association between two disjoint nonempty terminal sets.
pub fn set_association(p: &CoverSet, q: &CoverSet, assoc: &AssociationMatrix) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Argument(
            "set-wise association needs two nonempty sets".into(),
        ));
    }
    if !p.is_disjoint(q) {
        return Err(Error::Argument(format!(
            "cover sets {p:?} and {q:?} overlap"
        )));
    }
    let sum: f64 = p
        .iter()
        .flat_map(|&a| q.iter().map(move |&b| assoc.get(a, b)))
        .sum();
    Ok(sum / (p.len() * q.len()) as f64)
}

/// `a(i, j, k) * M(P, Q)`.
pub fn modulated_rule_prob(
    g: &SpatialGrammar,
    i: usize,
    j: usize,
    k: usize,
    p: &CoverSet,
    q: &CoverSet,
    assoc: &AssociationMatrix,
) -> Result<f64> {
    let m = set_association(p, q, assoc)?;
    Ok(g.rule(i, j, k) * m)
}

fn check_terminals(g: &SpatialGrammar, terminals: &[u32], assoc: &AssociationMatrix) -> Result<()> {
    if terminals.is_empty() {
        return Err(Error::Argument("empty terminal sequence".into()));
    }
    if assoc.size() != g.v() {
        return Err(Error::Argument(format!(
            "association matrix has size {}, grammar has {} terminals",
            assoc.size(),
            g.v()
        )));
    }
    if let Some(code) = terminals.iter().find(|&&c| c == 0 || c as usize > g.v()) {
        return Err(Error::Argument(format!(
            "terminal {code} outside vocabulary of size {}",
            g.v()
        )));
    }
    if terminals.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!(
            "terminals {terminals:?} must be distinct and in ascending order"
        )));
    }
    Ok(())
}

/// Log split weights `ln M(cover(s..m), cover(m..e))` for a terminal sequence.
fn split_weights(terminals: &[u32], assoc: &AssociationMatrix) -> SplitWeights {
    SplitWeights::from_fn(terminals.len(), |s, m, e| {
        let p: CoverSet = terminals[s..m].iter().copied().collect();
        let q: CoverSet = terminals[m..e].iter().copied().collect();
        set_association(&p, &q, assoc).expect("spans of distinct terminals are disjoint")
    })
}

fn term_indices(terminals: &[u32]) -> Vec<usize> {
    terminals.iter().map(|&c| c as usize - 1).collect()
}

/// One training item: a reduced time step's terminals and its association matrix.
#[derive(Debug, Clone)]
pub struct Instance {
    /// Where the instance came from, for error messages.
    pub origin: String,
    pub terminals: Vec<u32>,
    pub assoc: AssociationMatrix,
}

/// Log of the modulated inside score of the whole sequence under the start symbol.
pub fn inside_log_score(
    g: &SpatialGrammar,
    terminals: &[u32],
    assoc: &AssociationMatrix,
) -> Result<f64> {
    check_terminals(g, terminals, assoc)?;
    let lg = g.cnf.log_tables();
    let w = split_weights(terminals, assoc);
    Ok(cnf::inside(&lg, &term_indices(terminals), &w).root())
}

/// Expected rule/emission counts for one instance (E-step only).
pub fn expected_counts(
    g: &SpatialGrammar,
    terminals: &[u32],
    assoc: &AssociationMatrix,
) -> Result<Option<(f64, cnf::Counts)>> {
    check_terminals(g, terminals, assoc)?;
    let lg = g.cnf.log_tables();
    let w = split_weights(terminals, assoc);
    Ok(cnf::expected_counts(&lg, &term_indices(terminals), &w))
}

/// One perceptual-EM iteration. Returns the updated grammar and the batch
/// modulated log-likelihood measured before the update.
pub fn inside_outside_step(
    g: &SpatialGrammar,
    batch: &[Instance],
    max_len: usize,
    parallel: bool,
) -> Result<(SpatialGrammar, f64)> {
    let mut prepared = Vec::with_capacity(batch.len());
    for item in batch {
        check_terminals(g, &item.terminals, &item.assoc)
            .map_err(|e| Error::Argument(format!("{}: {e}", item.origin)))?;
        if item.terminals.len() > max_len {
            return Err(Error::Argument(format!(
                "{}: {} terminals exceed the maximum sequence length {max_len}",
                item.origin,
                item.terminals.len()
            )));
        }
        prepared.push((
            term_indices(&item.terminals),
            split_weights(&item.terminals, &item.assoc),
        ));
    }
    let (cnf, ll) = cnf::em_step(&g.cnf, &prepared, parallel).map_err(|idx| Error::Degenerate {
        origin: batch[idx].origin.clone(),
    })?;
    Ok((SpatialGrammar { seed: g.seed, cnf }, ll))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub nonterminals: usize,
    pub seed: u64,
    pub lambda: f64,
    pub max_len: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub parallel: bool,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            nonterminals: DEFAULT_NONTERMINALS,
            seed: DEFAULT_SEED,
            lambda: DEFAULT_LAMBDA,
            max_len: DEFAULT_MAX_LEN,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            parallel: false,
        }
    }
}

/// Relative log-likelihood improvement below `tol` (or no improvement).
pub(crate) fn converged(previous: f64, current: f64, tol: f64) -> bool {
    let improvement = current - previous;
    improvement <= 0.0 || improvement / previous.abs().max(f64::MIN_POSITIVE) < tol
}

pub fn merged_vocabulary(scenarios: &[Scenario]) -> Result<Vocabulary> {
    let mut vocab = Vocabulary::default();
    for s in scenarios {
        vocab = vocab.merge(&s.vocabulary)?;
    }
    Ok(vocab)
}

/// Training instances from every training-split step, expanded into lane-group combinations.
pub fn training_instances(
    scenarios: &[Scenario],
    vocab_size: usize,
    lambda: f64,
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for scenario in scenarios {
        for episode in scenario.episodes_in(Split::Train) {
            for step in &episode.steps {
                let combos = enumerate_combinations(step, &scenario.lane_groups);
                let many = combos.len() > 1;
                for (c, reduced) in combos.iter().enumerate() {
                    let mut origin = format!("{}/{} step {}", scenario.id, episode.id, step.index);
                    if many {
                        origin.push_str(&format!(" combination {c}"));
                    }
                    out.push(Instance {
                        origin,
                        terminals: reduced.terminals(),
                        assoc: build_association_matrix(reduced, vocab_size, lambda)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SpatialTraining {
    pub grammar: SpatialGrammar,
    /// Batch log-likelihood before each update.
    pub log_likelihoods: Vec<f64>,
}

pub fn train_on_instances(
    instances: &[Instance],
    vocab_size: usize,
    cfg: &SpatialConfig,
) -> Result<SpatialTraining> {
    if instances.is_empty() {
        return Err(Error::Argument("no training time steps".into()));
    }
    let mut grammar = SpatialGrammar::init(cfg.nonterminals, vocab_size, cfg.seed)?;
    let mut log_likelihoods = Vec::new();
    for _ in 0..cfg.max_iters {
        let (next, ll) = inside_outside_step(&grammar, instances, cfg.max_len, cfg.parallel)?;
        debug_assert!(next.normalization_error() < 1e-12);
        grammar = next;
        log_likelihoods.push(ll);
        if let [.., prev, cur] = log_likelihoods[..] {
            if converged(prev, cur, cfg.tol) {
                break;
            }
        }
    }
    Ok(SpatialTraining {
        grammar,
        log_likelihoods,
    })
}

/// Trains one grammar over the training steps of all given scenarios.
pub fn train_spatial(scenarios: &[Scenario], cfg: &SpatialConfig) -> Result<SpatialTraining> {
    let vocab = merged_vocabulary(scenarios)?;
    let instances = training_instances(scenarios, vocab.len(), cfg.lambda)?;
    train_on_instances(&instances, vocab.len(), cfg)
}

/// Best parse of one time step. `runner_up` is the score of the second best
/// distinct tree, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Parse {
    pub tree: ParseTree,
    pub score: f64,
    pub runner_up: Option<f64>,
}

/// Scores closer than this are reported as a near-tie.
pub const NEAR_TIE: f64 = 1e-9;

impl Parse {
    pub fn canonical_form(&self) -> String {
        self.tree.canonical_form()
    }

    pub fn near_tie(&self) -> bool {
        self.runner_up.is_some_and(|r| self.score - r < NEAR_TIE)
    }
}

pub fn most_probable_parse(
    g: &SpatialGrammar,
    terminals: &[u32],
    assoc: &AssociationMatrix,
) -> Result<Parse> {
    check_terminals(g, terminals, assoc)?;
    let lg = g.cnf.log_tables();
    let w = split_weights(terminals, assoc);
    let best = cnf::viterbi_two_best(&lg, &term_indices(terminals), &w, |t| format!("t{}", t + 1));
    let first = best
        .first()
        .ok_or_else(|| Error::Unparseable(format!("{terminals:?} has zero probability")))?;
    Ok(Parse {
        tree: first.canon.parse()?,
        score: first.score,
        runner_up: best.get(1).map(|c| c.score),
    })
}

#[derive(Serialize, Deserialize)]
struct GrammarFile {
    format_version: u32,
    n: usize,
    v: usize,
    seed: u64,
    binary_rules: Vec<f64>,
    emissions: Vec<f64>,
}

impl Versioned for GrammarFile {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

impl SpatialGrammar {
    pub fn to_json(&self) -> String {
        persist::to_json(&GrammarFile {
            format_version: persist::FORMAT_VERSION,
            n: self.n(),
            v: self.v(),
            seed: self.seed,
            binary_rules: self.cnf.binary_rules().to_vec(),
            emissions: self.cnf.emissions().to_vec(),
        })
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let f: GrammarFile = persist::from_json(text, context)?;
        SpatialGrammar::from_parts(f.n, f.v, f.seed, f.binary_rules, f.emissions)
    }
}
