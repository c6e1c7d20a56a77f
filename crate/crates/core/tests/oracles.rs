mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semmem::events::EventSequence;
use semmem::spatial::{self, inside_outside_step, Instance, SpatialGrammar};
use semmem::temporal::{
    learn_temporal_pcfg, predict_pcfg, temporal_em_step, TemporalConfig, TemporalPcfg,
};

#[test]
fn viterbi_and_inside_match_enumeration_on_100_grammars() {
    let mut checked = 0;
    for seed in 0..100 {
        checked += check_spatial_oracle(seed, 1e-10).unwrap();
    }
    assert!(checked > 500, "only {checked} sequences checked");
}

#[test]
fn expected_counts_match_enumeration() {
    for seed in 0..40 {
        let (g, assoc) = random_spatial(seed);
        let (n, v) = (g.n(), g.v());
        for codes in ascending_subsets(v, 3) {
            let seq: Vec<usize> = codes.iter().map(|&c| c as usize - 1).collect();
            let ds = derivations(g.cnf(), &seq, &|s, m, e| {
                span_association(&codes, &assoc, s, m, e)
            });
            let z: f64 = ds.iter().map(|d| d.prob).sum();
            let got = spatial::expected_counts(&g, &codes, &assoc).unwrap();
            if z == 0.0 {
                assert!(got.is_none());
                continue;
            }
            let (log_z, counts) = got.unwrap();
            assert!((log_z.exp() - z).abs() < 1e-10);
            let mut binary = vec![0.0; n * n * n];
            let mut emissions = vec![0.0; n * v];
            for d in &ds {
                for &(i, j, k) in &d.binary {
                    binary[(i * n + j) * n + k] += d.prob / z;
                }
                for &(i, t) in &d.emissions {
                    emissions[i * v + t] += d.prob / z;
                }
            }
            for (a, b) in counts.binary.iter().zip(&binary) {
                assert!(
                    (a - b).abs() < 1e-10,
                    "seed {seed} {codes:?}: rule count {a} vs {b}"
                );
            }
            for (a, b) in counts.emissions.iter().zip(&emissions) {
                assert!(
                    (a - b).abs() < 1e-10,
                    "seed {seed} {codes:?}: emission count {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn temporal_probability_matches_tree_sum() {
    for seed in 0..30 {
        let pcfg = random_temporal(seed, 3, 4);
        let a = pcfg.alphabet().len();
        for len in 1..=4 {
            for seq in strings(a, len) {
                let labels: Vec<&str> = seq.iter().map(|&t| pcfg.alphabet()[t].as_str()).collect();
                let p = pcfg.sequence_probability(&labels).unwrap();
                let want = tree_sum(pcfg.cnf(), &seq);
                assert!(
                    (p - want).abs() < 1e-10,
                    "seed {seed} {labels:?}: {p} vs {want}"
                );
                let explicit: f64 = derivations(pcfg.cnf(), &seq, &|_, _, _| 1.0)
                    .iter()
                    .map(|d| d.prob)
                    .sum();
                assert!((p - explicit).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn length_mass_matches_enumeration() {
    for seed in 0..10 {
        let pcfg = random_temporal(seed, 3, 3);
        let a = pcfg.alphabet().len();
        let mass = pcfg.length_mass(5);
        for len in 1..=5 {
            let total: f64 = strings(a, len)
                .iter()
                .map(|s| {
                    let labels: Vec<&str> =
                        s.iter().map(|&t| pcfg.alphabet()[t].as_str()).collect();
                    pcfg.sequence_probability(&labels).unwrap()
                })
                .sum();
            assert!(
                (mass[len - 1] - total).abs() < 1e-12,
                "seed {seed} len {len}"
            );
        }
    }
}

#[test]
fn prediction_matches_brute_force() {
    for seed in 0..200 {
        check_prediction_oracle(seed, 1e-10).unwrap();
    }
}

fn abc_corpus(copies: usize) -> Vec<EventSequence> {
    (0..copies)
        .map(|n| EventSequence {
            episode_id: format!("e{n}"),
            labels: vec!["A".into(), "B".into(), "C".into()],
            durations: vec![1, 1, 1],
        })
        .collect()
}

fn abc_grammar() -> TemporalPcfg {
    let alphabet: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    learn_temporal_pcfg(&abc_corpus(10), &alphabet, &TemporalConfig::default())
        .unwrap()
        .pcfg
}

#[test]
fn abc_corpus_concentrates_on_abc() {
    let pcfg = abc_grammar();
    let mut total = 0.0;
    for len in 1..=3 {
        for seq in strings(3, len) {
            let labels: Vec<&str> = seq.iter().map(|&t| pcfg.alphabet()[t].as_str()).collect();
            total += pcfg.sequence_probability(&labels).unwrap();
        }
    }
    let abc = pcfg.sequence_probability(&["A", "B", "C"]).unwrap();
    assert!(abc / total >= 0.99, "P(ABC | len <= 3) = {}", abc / total);
}

#[test]
fn abc_prefix_predictions() {
    let pcfg = abc_grammar();
    let p = predict_pcfg(&pcfg, &["A"], 3, 3, 1000).unwrap();
    assert_eq!(p.completions[0].labels, vec!["B", "C"]);
    let p = predict_pcfg(&pcfg, &[] as &[&str], 3, 3, 1000).unwrap();
    assert_eq!(p.completions[0].labels, vec!["A", "B", "C"]);
    let p = predict_pcfg(&pcfg, &["A", "B", "C"], 3, 3, 1000).unwrap();
    assert!(p.completions[0].labels.is_empty());
}

#[test]
fn temporal_learning_is_bit_identical() {
    let a = abc_grammar();
    let b = abc_grammar();
    assert_eq!(a.to_json(), b.to_json());
}

fn random_batch(rng: &mut ChaCha8Rng, v: usize) -> Vec<Instance> {
    let subsets = ascending_subsets(v, 4);
    (0..rng.gen_range(1..6))
        .map(|n| {
            let terminals = subsets[rng.gen_range(0..subsets.len())].clone();
            let step = semmem::scenario::TimeStep {
                index: n,
                dt: 0.1,
                observations: terminals
                    .iter()
                    .map(|&code| semmem::scenario::Observation {
                        code,
                        dy: rng.gen_range(-40.0..40.0),
                        dx: rng.gen_range(-5.0..5.0),
                    })
                    .collect(),
            };
            Instance {
                origin: format!("instance {n}"),
                assoc: semmem::scenario::build_association_matrix(&step, v, 20.0).unwrap(),
                terminals,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spatial_em_is_monotone_and_normalized(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=4);
        let v = rng.gen_range(1..=4);
        let batch = random_batch(&mut rng, v);
        let mut g = SpatialGrammar::init(n, v, seed).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..15 {
            let (next, ll) = inside_outside_step(&g, &batch, 8, false).unwrap();
            prop_assert!(ll >= prev - 1e-9, "log-likelihood fell from {} to {}", prev, ll);
            prop_assert!(next.normalization_error() <= 1e-12);
            prev = ll;
            g = next;
        }
    }

    #[test]
    fn temporal_em_is_monotone_and_normalized(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rng.gen_range(1..=4);
        let corpus: Vec<Vec<usize>> = (0..rng.gen_range(1..6))
            .map(|_| (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..a)).collect())
            .collect();
        let alphabet = (0..a).map(|t| format!("E{t}")).collect();
        let mut pcfg = TemporalPcfg::init(rng.gen_range(1..=4), alphabet, seed).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..15 {
            let (next, ll) = temporal_em_step(&pcfg, &corpus).unwrap();
            prop_assert!(ll >= prev - 1e-9, "log-likelihood fell from {} to {}", prev, ll);
            prop_assert!(next.normalization_error() <= 1e-12);
            prev = ll;
            pcfg = next;
        }
    }
}
