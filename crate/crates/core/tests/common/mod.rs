//! Brute-force oracles and fixture helpers shared by the integration tests.
//! Everything here enumerates trees explicitly and never touches a chart.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semmem::cnf::{Cnf, START};
use semmem::scenario::{
    build_association_matrix, load_scenario, AssociationMatrix, Observation, Scenario, TimeStep,
};
use semmem::spatial::{self, SpatialGrammar};
use semmem::temporal::{predict_pcfg, TemporalPcfg};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn load_fixture(name: &str) -> Scenario {
    load_scenario(&fixture(name)).expect("fixture loads")
}

pub fn all_fixtures() -> Vec<Scenario> {
    vec![
        load_fixture("scenario1.json"),
        load_fixture("scenario2.json"),
    ]
}

/// One derivation of a sequence from the start symbol.
#[derive(Debug, Clone)]
pub struct Derivation {
    pub prob: f64,
    /// Canonical tree without preterminals.
    pub canon: String,
    pub binary: Vec<(usize, usize, usize)>,
    pub emissions: Vec<(usize, usize)>,
}

/// Every derivation of `seq` rooted at nonterminal `i`. `weight(s, m, e)`
/// multiplies each binary rule applied over the split `[s, m) [m, e)`.
pub fn derivations_from(
    g: &Cnf,
    seq: &[usize],
    i: usize,
    s: usize,
    e: usize,
    weight: &dyn Fn(usize, usize, usize) -> f64,
    name: &dyn Fn(usize) -> String,
) -> Vec<Derivation> {
    if e - s == 1 {
        return vec![Derivation {
            prob: g.emission(i, seq[s]),
            canon: name(seq[s]),
            binary: vec![],
            emissions: vec![(i, seq[s])],
        }];
    }
    let n = g.nonterminals();
    let mut out = Vec::new();
    for m in s + 1..e {
        let w = weight(s, m, e);
        for j in 0..n {
            let lefts = derivations_from(g, seq, j, s, m, weight, name);
            for k in 0..n {
                let rule = g.rule(i, j, k);
                let rights = derivations_from(g, seq, k, m, e, weight, name);
                for l in &lefts {
                    for r in &rights {
                        let mut binary = vec![(i, j, k)];
                        binary.extend(&l.binary);
                        binary.extend(&r.binary);
                        out.push(Derivation {
                            prob: rule * w * l.prob * r.prob,
                            canon: format!("({} {} {})", i + 1, l.canon, r.canon),
                            binary,
                            emissions: l.emissions.iter().chain(&r.emissions).copied().collect(),
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn derivations(
    g: &Cnf,
    seq: &[usize],
    weight: &dyn Fn(usize, usize, usize) -> f64,
) -> Vec<Derivation> {
    derivations_from(g, seq, START, 0, seq.len(), weight, &|t| {
        format!("t{}", t + 1)
    })
}

/// Mean pairwise association between the codes of two spans, computed
/// directly from the matrix.
pub fn span_association(
    codes: &[u32],
    assoc: &AssociationMatrix,
    s: usize,
    m: usize,
    e: usize,
) -> f64 {
    let mut sum = 0.0;
    for &p in &codes[s..m] {
        for &q in &codes[m..e] {
            sum += assoc.get(p, q);
        }
    }
    sum / ((m - s) * (e - m)) as f64
}

/// Random grammar tables with skewed rows and occasional exact zeros.
pub fn random_tables(rng: &mut ChaCha8Rng, n: usize, v: usize) -> (Vec<f64>, Vec<f64>) {
    let mut binary = vec![0.0; n * n * n];
    let mut emissions = vec![0.0; n * v];
    for i in 0..n {
        let rules = &mut binary[i * n * n..(i + 1) * n * n];
        let emits = &mut emissions[i * v..(i + 1) * v];
        for x in rules.iter_mut().chain(emits.iter_mut()) {
            let u: f64 = rng.gen();
            *x = if rng.gen_bool(0.15) {
                0.0
            } else {
                u * u * u + 1e-3
            };
        }
        // keep every row usable
        emits[rng.gen_range(0..v)] += 0.05;
        let total: f64 = rules.iter().chain(emits.iter()).sum();
        for x in rules.iter_mut().chain(emits.iter_mut()) {
            *x /= total;
        }
    }
    (binary, emissions)
}

pub fn random_spatial(seed: u64) -> (SpatialGrammar, AssociationMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let v = rng.gen_range(1..=4);
    let (binary, emissions) = random_tables(&mut rng, n, v);
    let g = SpatialGrammar::from_parts(n, v, seed, binary, emissions).unwrap();
    let step = TimeStep {
        index: 0,
        dt: 0.1,
        observations: (1..=v as u32)
            .map(|code| Observation {
                code,
                dy: rng.gen_range(-40.0..40.0),
                dx: rng.gen_range(-10.0..10.0),
            })
            .collect(),
    };
    let assoc = build_association_matrix(&step, v, 20.0).unwrap();
    (g, assoc)
}

pub fn random_temporal(seed: u64, max_k: usize, max_a: usize) -> TemporalPcfg {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=max_k);
    let a = rng.gen_range(1..=max_a);
    let (binary, emissions) = random_tables(&mut rng, k, a);
    let alphabet = (0..a).map(|t| format!("E{}", t + 1)).collect();
    TemporalPcfg::from_parts(k, alphabet, seed, binary, emissions).unwrap()
}

/// All ascending subsets of `1..=v` with between 1 and `max_len` codes.
pub fn ascending_subsets(v: usize, max_len: usize) -> Vec<Vec<u32>> {
    (1u32..1 << v)
        .map(|mask| {
            (0..v as u32)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| b + 1)
                .collect::<Vec<_>>()
        })
        .filter(|s| s.len() <= max_len)
        .collect()
}

/// All strings over `0..a` of exactly `len` symbols.
pub fn strings(a: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..a).map(move |t| {
                    let mut s = s.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
    }
    out
}

/// Checks most_probable_parse and the inside score of every ascending
/// terminal sequence against explicit derivation enumeration. Returns the
/// number of sequences checked or the first disagreement.
pub fn check_spatial_oracle(seed: u64, tol: f64) -> Result<usize, String> {
    let (g, assoc) = random_spatial(seed);
    let mut checked = 0;
    for codes in ascending_subsets(g.v(), 4) {
        let seq: Vec<usize> = codes.iter().map(|&c| c as usize - 1).collect();
        let ds = derivations(g.cnf(), &seq, &|s, m, e| {
            span_association(&codes, &assoc, s, m, e)
        });
        let total: f64 = ds.iter().map(|d| d.prob).sum();
        let inside = spatial::inside_log_score(&g, &codes, &assoc).map_err(|e| e.to_string())?;
        if (inside.exp() - total).abs() > tol {
            return Err(format!(
                "seed {seed} {codes:?}: inside {} vs sum {total}",
                inside.exp()
            ));
        }
        let best = ds.iter().map(|d| d.prob).fold(0.0, f64::max);
        match spatial::most_probable_parse(&g, &codes, &assoc) {
            Err(_) if best == 0.0 => {}
            Err(e) => {
                return Err(format!(
                    "seed {seed} {codes:?}: {e}, but best derivation {best}"
                ))
            }
            Ok(parse) => {
                if (parse.score - best.ln()).abs() > tol {
                    return Err(format!(
                        "seed {seed} {codes:?}: viterbi {} vs max {}",
                        parse.score,
                        best.ln()
                    ));
                }
                // the tree must be one of the maximizers, smallest form on exact ties
                let winners: Vec<&str> = ds
                    .iter()
                    .filter(|d| d.prob > 0.0 && (d.prob.ln() - best.ln()).abs() <= tol)
                    .map(|d| d.canon.as_str())
                    .collect();
                if !winners.contains(&parse.canonical_form().as_str()) {
                    return Err(format!(
                        "seed {seed} {codes:?}: tree {} not among {winners:?}",
                        parse.canonical_form()
                    ));
                }
            }
        }
        checked += 1;
    }
    Ok(checked)
}

/// Binary tree shapes over `len` leaves.
#[derive(Debug, Clone)]
pub enum Shape {
    Leaf,
    Node(usize, Box<Shape>, Box<Shape>),
}

pub fn shapes(len: usize) -> Vec<Shape> {
    if len == 1 {
        return vec![Shape::Leaf];
    }
    let mut out = Vec::new();
    for left in 1..len {
        for l in shapes(left) {
            for r in shapes(len - left) {
                out.push(Shape::Node(left, Box::new(l.clone()), Box::new(r)));
            }
        }
    }
    out
}

/// Probability of one shape over `seq` for every root nonterminal, summing
/// over all labelings of that shape.
fn shape_mass(g: &Cnf, shape: &Shape, seq: &[usize]) -> Vec<f64> {
    let n = g.nonterminals();
    match shape {
        Shape::Leaf => (0..n).map(|i| g.emission(i, seq[0])).collect(),
        Shape::Node(split, l, r) => {
            let lm = shape_mass(g, l, &seq[..*split]);
            let rm = shape_mass(g, r, &seq[*split..]);
            (0..n)
                .map(|i| {
                    let mut total = 0.0;
                    for (j, lp) in lm.iter().enumerate() {
                        for (k, rp) in rm.iter().enumerate() {
                            total += g.rule(i, j, k) * lp * rp;
                        }
                    }
                    total
                })
                .collect()
        }
    }
}

/// Unmodulated string probability as a sum over explicit tree shapes.
pub fn tree_sum(g: &Cnf, seq: &[usize]) -> f64 {
    shapes(seq.len())
        .iter()
        .map(|s| shape_mass(g, s, seq)[START])
        .sum()
}

/// Independent re-implementation of the PCFG predictor: enumerate every
/// extension, score by tree sum, normalize, rank.
pub fn brute_force_prediction(
    pcfg: &TemporalPcfg,
    prefix: &[usize],
    max_len: usize,
    top_k: usize,
) -> Vec<(Vec<String>, f64)> {
    let a = pcfg.alphabet().len();
    let mut scored = Vec::new();
    let mut total = 0.0;
    for extra in 0..=max_len - prefix.len() {
        for suffix in strings(a, extra) {
            let seq: Vec<usize> = prefix.iter().chain(&suffix).copied().collect();
            if seq.is_empty() {
                continue;
            }
            let p = tree_sum(pcfg.cnf(), &seq);
            total += p;
            if p > 0.0 {
                let labels: Vec<String> =
                    suffix.iter().map(|&t| pcfg.alphabet()[t].clone()).collect();
                scored.push((labels, p));
            }
        }
    }
    if total <= 0.0 {
        return vec![];
    }
    let mut ranked: Vec<(Vec<String>, f64)> =
        scored.into_iter().map(|(l, p)| (l, p / total)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    ranked
}

/// Compares predict_pcfg with the brute-force predictor on a random grammar
/// (alphabet ≤ 4, max_len ≤ 6). Rankings must agree label for label; two
/// entries whose oracle scores are equal to within `tol` may appear in either
/// order.
pub fn check_prediction_oracle(seed: u64, tol: f64) -> Result<usize, String> {
    let pcfg = random_temporal(seed, 3, 4);
    let a = pcfg.alphabet().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let max_len = rng.gen_range(1..=6usize);
    let prefix_len = rng.gen_range(0..=max_len.min(2));
    let prefix: Vec<usize> = (0..prefix_len).map(|_| rng.gen_range(0..a)).collect();
    let top_k = rng.gen_range(1..=5);
    let labels: Vec<&str> = prefix
        .iter()
        .map(|&t| pcfg.alphabet()[t].as_str())
        .collect();
    let got = predict_pcfg(&pcfg, &labels, max_len, top_k, 1_000_000).map_err(|e| e.to_string())?;
    let want = brute_force_prediction(&pcfg, &prefix, max_len, top_k + 1);
    let shown = want.len().min(top_k);
    if got.completions.len() != shown {
        return Err(format!(
            "seed {seed}: {} completions, oracle has {shown}",
            got.completions.len()
        ));
    }
    for (pos, c) in got.completions.iter().enumerate() {
        let (labels, score) = &want[pos];
        if (c.score - score).abs() > tol {
            return Err(format!(
                "seed {seed} rank {pos}: score {} vs {score}",
                c.score
            ));
        }
        if &c.labels != labels {
            let tied = want
                .iter()
                .any(|(l, s)| l == &c.labels && (s - score).abs() <= tol);
            if !tied {
                return Err(format!(
                    "seed {seed} rank {pos}: {:?} vs {labels:?}",
                    c.labels
                ));
            }
        }
    }
    Ok(got.completions.len())
}
