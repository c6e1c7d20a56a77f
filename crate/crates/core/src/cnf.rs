//! Chomsky-normal-form grammar tables and log-space chart algorithms shared by
//! the spatial and temporal grammars: inside, outside, expected counts, EM
//! re-estimation and two-best Viterbi.
//!
//! Nonterminals are 0-based here; index 0 is the start symbol. Every
//! binary-rule application over a span `[s, e)` split at `m` is scaled by a
//! per-split weight (in log space); unweighted grammars use zero.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const START: usize = 0;

/// Maximum relative deviation of initial entries from uniform.
pub const INIT_PERTURBATION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Cnf {
    n: usize,
    v: usize,
    /// `a(i, j, k)` at `(i * n + j) * n + k`.
    binary: Vec<f64>,
    /// `e(i, t)` at `i * v + t`.
    emissions: Vec<f64>,
}

impl Cnf {
    pub fn random(n: usize, v: usize, seed: u64) -> Result<Cnf> {
        if n == 0 || v == 0 {
            return Err(Error::Argument(format!(
                "grammar needs at least one nonterminal and one terminal (n = {n}, v = {v})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut binary = vec![0.0; n * n * n];
        let mut emissions = vec![0.0; n * v];
        for i in 0..n {
            let rules = &mut binary[i * n * n..(i + 1) * n * n];
            let emits = &mut emissions[i * v..(i + 1) * v];
            for x in rules.iter_mut().chain(emits.iter_mut()) {
                *x = 1.0 + INIT_PERTURBATION * rng.gen_range(-1.0..1.0);
            }
            let total: f64 = rules.iter().chain(emits.iter()).sum();
            for x in rules.iter_mut().chain(emits.iter_mut()) {
                *x /= total;
            }
        }
        Ok(Cnf {
            n,
            v,
            binary,
            emissions,
        })
    }

    pub fn from_parts(n: usize, v: usize, binary: Vec<f64>, emissions: Vec<f64>) -> Result<Cnf> {
        if n == 0 || v == 0 {
            return Err(Error::Argument(format!("empty grammar (n = {n}, v = {v})")));
        }
        if binary.len() != n * n * n || emissions.len() != n * v {
            return Err(Error::Argument(format!(
                "table sizes {} / {} do not match n = {n}, v = {v}",
                binary.len(),
                emissions.len()
            )));
        }
        if let Some(x) = binary
            .iter()
            .chain(&emissions)
            .find(|x| !(x.is_finite() && **x >= 0.0))
        {
            return Err(Error::Argument(format!(
                "rule probability {x} is not a non-negative number"
            )));
        }
        Ok(Cnf {
            n,
            v,
            binary,
            emissions,
        })
    }

    pub fn nonterminals(&self) -> usize {
        self.n
    }

    pub fn terminals(&self) -> usize {
        self.v
    }

    pub fn rule(&self, i: usize, j: usize, k: usize) -> f64 {
        self.binary[(i * self.n + j) * self.n + k]
    }

    pub fn emission(&self, i: usize, t: usize) -> f64 {
        self.emissions[i * self.v + t]
    }

    pub fn binary_rules(&self) -> &[f64] {
        &self.binary
    }

    pub fn emissions(&self) -> &[f64] {
        &self.emissions
    }

    /// Total outgoing mass of nonterminal `i`.
    pub fn row_mass(&self, i: usize) -> f64 {
        let nn = self.n * self.n;
        self.binary[i * nn..(i + 1) * nn].iter().sum::<f64>()
            + self.emissions[i * self.v..(i + 1) * self.v]
                .iter()
                .sum::<f64>()
    }

    /// Largest `|row_mass(i) - 1|` over all nonterminals.
    pub fn normalization_error(&self) -> f64 {
        (0..self.n)
            .map(|i| (self.row_mass(i) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn log_tables(&self) -> LogCnf {
        let n = self.n;
        let rules = (0..n)
            .map(|i| {
                let mut list = Vec::new();
                for j in 0..n {
                    for k in 0..n {
                        let p = self.rule(i, j, k);
                        if p > 0.0 {
                            list.push((j, k, p.ln()));
                        }
                    }
                }
                list
            })
            .collect();
        LogCnf {
            n,
            v: self.v,
            rules,
            log_emissions: self.emissions.iter().map(|p| p.ln()).collect(),
        }
    }

    /// M-step: normalizes expected counts per nonterminal. A nonterminal with
    /// no expected usage keeps its current distribution.
    pub(crate) fn reestimate(&self, counts: &Counts) -> Cnf {
        let (n, v) = (self.n, self.v);
        let nn = n * n;
        let mut next = self.clone();
        for i in 0..n {
            let rules = &counts.binary[i * nn..(i + 1) * nn];
            let emits = &counts.emissions[i * v..(i + 1) * v];
            let total: f64 = rules.iter().sum::<f64>() + emits.iter().sum::<f64>();
            if total > 0.0 && total.is_finite() {
                for (dst, c) in next.binary[i * nn..(i + 1) * nn].iter_mut().zip(rules) {
                    *dst = c / total;
                }
                for (dst, c) in next.emissions[i * v..(i + 1) * v].iter_mut().zip(emits) {
                    *dst = c / total;
                }
            }
        }
        next
    }
}

/// Log-space view of a [`Cnf`] with zero-probability rules dropped.
pub(crate) struct LogCnf {
    pub n: usize,
    pub v: usize,
    /// Per parent: `(left, right, ln a)`.
    pub rules: Vec<Vec<(usize, usize, f64)>>,
    pub log_emissions: Vec<f64>,
}

impl LogCnf {
    pub fn log_emission(&self, i: usize, t: usize) -> f64 {
        self.log_emissions[i * self.v + t]
    }
}

/// Log weight of every split `(s, m, e)` of a sequence of length `len`.
#[derive(Debug, Clone)]
pub struct SplitWeights {
    len: usize,
    log: Option<Vec<f64>>,
}

impl SplitWeights {
    pub fn neutral(len: usize) -> Self {
        SplitWeights { len, log: None }
    }

    pub fn from_fn(len: usize, mut weight: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let w = len + 1;
        let mut log = vec![f64::NEG_INFINITY; w * w * w];
        for s in 0..len {
            for e in s + 2..=len {
                for m in s + 1..e {
                    log[(s * w + m) * w + e] = weight(s, m, e).ln();
                }
            }
        }
        SplitWeights {
            len,
            log: Some(log),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn log(&self, s: usize, m: usize, e: usize) -> f64 {
        match &self.log {
            None => 0.0,
            Some(log) => {
                let w = self.len + 1;
                log[(s * w + m) * w + e]
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    const EMPTY: LogSum = LogSum {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    #[inline]
    fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Span chart indexed by `(s, e, nonterminal)` with `e` exclusive.
pub(crate) struct Chart {
    len: usize,
    n: usize,
    cells: Vec<f64>,
}

impl Chart {
    fn new(len: usize, n: usize) -> Self {
        Chart {
            len,
            n,
            cells: vec![f64::NEG_INFINITY; (len + 1) * (len + 1) * n],
        }
    }

    #[inline]
    fn idx(&self, s: usize, e: usize, i: usize) -> usize {
        (s * (self.len + 1) + e) * self.n + i
    }

    #[inline]
    pub fn get(&self, s: usize, e: usize, i: usize) -> f64 {
        self.cells[self.idx(s, e, i)]
    }

    #[inline]
    fn set(&mut self, s: usize, e: usize, i: usize, x: f64) {
        let idx = self.idx(s, e, i);
        self.cells[idx] = x;
    }

    pub fn root(&self) -> f64 {
        self.get(0, self.len, START)
    }
}

/// Inside chart; `leaf(pos, i)` is the log score of nonterminal `i` covering position `pos`.
pub(crate) fn inside_with(
    g: &LogCnf,
    len: usize,
    weights: &SplitWeights,
    leaf: impl Fn(usize, usize) -> f64,
) -> Chart {
    let n = g.n;
    let mut chart = Chart::new(len, n);
    for s in 0..len {
        for i in 0..n {
            chart.set(s, s + 1, i, leaf(s, i));
        }
    }
    for width in 2..=len {
        for s in 0..=len - width {
            let e = s + width;
            for i in 0..n {
                let mut acc = LogSum::EMPTY;
                for m in s + 1..e {
                    let lw = weights.log(s, m, e);
                    if lw == f64::NEG_INFINITY {
                        continue;
                    }
                    for &(j, k, la) in &g.rules[i] {
                        let l = chart.get(s, m, j);
                        if l == f64::NEG_INFINITY {
                            continue;
                        }
                        acc.add(la + lw + l + chart.get(m, e, k));
                    }
                }
                chart.set(s, e, i, acc.value());
            }
        }
    }
    chart
}

pub(crate) fn inside(g: &LogCnf, seq: &[usize], weights: &SplitWeights) -> Chart {
    inside_with(g, seq.len(), weights, |pos, i| g.log_emission(i, seq[pos]))
}

fn outside(g: &LogCnf, len: usize, weights: &SplitWeights, inside: &Chart) -> Chart {
    let n = g.n;
    let mut out = Chart::new(len, n);
    out.set(0, len, START, 0.0);
    for width in (2..=len).rev() {
        for s in 0..=len - width {
            let e = s + width;
            for i in 0..n {
                let o = out.get(s, e, i);
                if o == f64::NEG_INFINITY {
                    continue;
                }
                for m in s + 1..e {
                    let lw = weights.log(s, m, e);
                    if lw == f64::NEG_INFINITY {
                        continue;
                    }
                    for &(j, k, la) in &g.rules[i] {
                        let base = o + la + lw;
                        let l = inside.get(s, m, j);
                        let r = inside.get(m, e, k);
                        let to_left = log_add(out.get(s, m, j), base + r);
                        out.set(s, m, j, to_left);
                        let to_right = log_add(out.get(m, e, k), base + l);
                        out.set(m, e, k, to_right);
                    }
                }
            }
        }
    }
    out
}

/// Expected rule and emission counts, dense like the [`Cnf`] tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Counts {
    pub binary: Vec<f64>,
    pub emissions: Vec<f64>,
}

impl Counts {
    pub fn zeros(n: usize, v: usize) -> Self {
        Counts {
            binary: vec![0.0; n * n * n],
            emissions: vec![0.0; n * v],
        }
    }

    pub fn add(&mut self, other: &Counts) {
        for (a, b) in self.binary.iter_mut().zip(&other.binary) {
            *a += b;
        }
        for (a, b) in self.emissions.iter_mut().zip(&other.emissions) {
            *a += b;
        }
    }
}

/// Posterior expected counts for one sequence together with its log inside
/// probability. `None` when the sequence has zero probability.
pub(crate) fn expected_counts(
    g: &LogCnf,
    seq: &[usize],
    weights: &SplitWeights,
) -> Option<(f64, Counts)> {
    let len = seq.len();
    let n = g.n;
    let ins = inside(g, seq, weights);
    let log_z = ins.root();
    if log_z == f64::NEG_INFINITY || log_z.is_nan() {
        return None;
    }
    let out = outside(g, len, weights, &ins);
    let mut counts = Counts::zeros(n, g.v);
    for width in 2..=len {
        for s in 0..=len - width {
            let e = s + width;
            for i in 0..n {
                let o = out.get(s, e, i);
                if o == f64::NEG_INFINITY {
                    continue;
                }
                for m in s + 1..e {
                    let lw = weights.log(s, m, e);
                    if lw == f64::NEG_INFINITY {
                        continue;
                    }
                    for &(j, k, la) in &g.rules[i] {
                        let x = o + la + lw + ins.get(s, m, j) + ins.get(m, e, k) - log_z;
                        if x > f64::NEG_INFINITY {
                            counts.binary[(i * n + j) * n + k] += x.exp();
                        }
                    }
                }
            }
        }
    }
    for (s, &t) in seq.iter().enumerate() {
        for i in 0..n {
            let x = out.get(s, s + 1, i) + g.log_emission(i, t) - log_z;
            if x > f64::NEG_INFINITY {
                counts.emissions[i * g.v + t] += x.exp();
            }
        }
    }
    Some((log_z, counts))
}

/// One EM iteration over a batch. Returns the re-estimated grammar and the
/// batch log-likelihood under `g`, or the index of the first zero-probability
/// item. Reduction is in batch order whether or not `parallel` is set.
pub(crate) fn em_step(
    g: &Cnf,
    batch: &[(Vec<usize>, SplitWeights)],
    parallel: bool,
) -> std::result::Result<(Cnf, f64), usize> {
    let lg = g.log_tables();
    let per_item: Vec<Option<(f64, Counts)>> = if parallel {
        batch
            .par_iter()
            .map(|(seq, w)| expected_counts(&lg, seq, w))
            .collect()
    } else {
        batch
            .iter()
            .map(|(seq, w)| expected_counts(&lg, seq, w))
            .collect()
    };
    let mut total = Counts::zeros(g.n, g.v);
    let mut log_likelihood = 0.0;
    for (idx, item) in per_item.iter().enumerate() {
        let (log_z, counts) = item.as_ref().ok_or(idx)?;
        log_likelihood += log_z;
        total.add(counts);
    }
    Ok((g.reestimate(&total), log_likelihood))
}

#[derive(Debug, Clone)]
pub(crate) struct Candidate {
    pub score: f64,
    pub canon: Rc<str>,
}

fn better(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.canon.cmp(&b.canon))
}

/// Keeps the best two distinct trees; a repeated tree keeps its best score.
fn offer(list: &mut Vec<Candidate>, cand: Candidate) {
    if let Some(existing) = list.iter_mut().find(|c| c.canon == cand.canon) {
        if cand.score > existing.score {
            existing.score = cand.score;
        }
    } else {
        list.push(cand);
    }
    list.sort_by(better);
    list.truncate(2);
}

/// Two best distinct canonical trees rooted at the start symbol, best first.
/// A tree's score is its best derivation: preterminals are not part of the
/// canonical form. Equal scores order by canonical text.
pub(crate) fn viterbi_two_best(
    g: &LogCnf,
    seq: &[usize],
    weights: &SplitWeights,
    leaf_name: impl Fn(usize) -> String,
) -> Vec<Candidate> {
    let len = seq.len();
    let n = g.n;
    let w = len + 1;
    let idx = |s: usize, e: usize, i: usize| (s * w + e) * n + i;
    let mut cells: Vec<Vec<Candidate>> = vec![Vec::new(); w * w * n];
    for (s, &t) in seq.iter().enumerate() {
        let name: Rc<str> = leaf_name(t).into();
        for i in 0..n {
            let score = g.log_emission(i, t);
            if score > f64::NEG_INFINITY {
                cells[idx(s, s + 1, i)].push(Candidate {
                    score,
                    canon: name.clone(),
                });
            }
        }
    }
    for width in 2..=len {
        for s in 0..=len - width {
            let e = s + width;
            for i in 0..n {
                let mut list: Vec<Candidate> = Vec::with_capacity(3);
                for m in s + 1..e {
                    let lw = weights.log(s, m, e);
                    if lw == f64::NEG_INFINITY {
                        continue;
                    }
                    for &(j, k, la) in &g.rules[i] {
                        for l in &cells[idx(s, m, j)] {
                            for r in &cells[idx(m, e, k)] {
                                let score = la + lw + l.score + r.score;
                                if score == f64::NEG_INFINITY {
                                    continue;
                                }
                                if list.len() == 2 && score < list[1].score {
                                    continue;
                                }
                                let canon: Rc<str> =
                                    format!("({} {} {})", i + 1, l.canon, r.canon).into();
                                offer(&mut list, Candidate { score, canon });
                            }
                        }
                    }
                }
                cells[idx(s, e, i)] = list;
            }
        }
    }
    if len == 0 {
        return Vec::new();
    }
    std::mem::take(&mut cells[idx(0, len, START)])
}
