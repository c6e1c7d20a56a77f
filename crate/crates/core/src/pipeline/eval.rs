//! Regression report over shipped fixtures: event-class counts, property
//! checks and a per-step label trace.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::events::{segment_episode, EventCatalog, Provenance, Registration};
use crate::persist;
use crate::scenario::{Scenario, Split, TimeStep};
use crate::tree::ParseTree;

use super::artifacts::{SpatialArtifacts, TemporalArtifacts};
use super::config::RunConfig;
use super::predict::{predict_scenario, Predictor, SplitFilter};

pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl PropertyResult {
    fn check(name: &str, ok: bool, detail: String) -> Self {
        PropertyResult {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub label: String,
    pub provenance: Provenance,
    pub canonical: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: String,
    pub split: Split,
    pub steps: Vec<u64>,
    pub labels: Vec<Option<String>>,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub scenario: String,
    pub training_event_classes: usize,
    pub total_event_classes: usize,
    pub new_at_test: usize,
    pub stop_event: Option<String>,
    pub events: Vec<EventRow>,
    pub properties: Vec<PropertyResult>,
    pub trace: Vec<EpisodeTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config: RunConfig,
    pub scenarios: Vec<ScenarioEval>,
}

/// Largest drop between consecutive log-likelihoods (0 when non-decreasing).
pub fn largest_drop(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

/// The catalog event whose leaves are exactly `codes`.
pub fn event_with_leaves(catalog: &EventCatalog, codes: &[u32]) -> Option<String> {
    let wanted: BTreeSet<u32> = codes.iter().copied().collect();
    catalog.iter().find_map(|(canonical, info)| {
        let tree: ParseTree = canonical.parse().ok()?;
        (tree.leaves().len() == wanted.len() && tree.cover() == wanted).then(|| info.label.clone())
    })
}

/// Checks that for every proper prefix of every sequence, each top-k
/// completion from both predictors yields an episode (prefix + completion)
/// containing `stop_label`. Returns one line per violation.
pub fn stop_sign_violations(
    predictor: &Predictor<'_>,
    sequences: &[Vec<String>],
    stop_label: &str,
) -> Vec<String> {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    for seq in sequences {
        for cut in 0..seq.len() {
            let prefix = &seq[..cut];
            if !seen.insert(prefix.to_vec()) {
                continue;
            }
            for record in predictor.predict(prefix) {
                if let Some(err) = &record.error {
                    violations.push(format!("{prefix:?} {:?}: {err}", record.source));
                    continue;
                }
                if record.completions.is_empty() {
                    violations.push(format!("{prefix:?} {:?}: no completion", record.source));
                }
                for c in &record.completions {
                    if !prefix.iter().chain(&c.labels).any(|l| l == stop_label) {
                        violations.push(format!(
                            "{prefix:?} {:?}: completion {:?}",
                            record.source, c.labels
                        ));
                    }
                }
            }
        }
    }
    violations
}

fn observation_key(step: &TimeStep) -> Vec<(u32, u64, u64)> {
    let mut key: Vec<_> = step
        .observations
        .iter()
        .map(|o| (o.code, o.dy.to_bits(), o.dx.to_bits()))
        .collect();
    key.sort_unstable();
    key
}

pub fn evaluate(
    scenario: &Scenario,
    spatial: &SpatialArtifacts,
    temporal: &TemporalArtifacts,
    cfg: &RunConfig,
) -> Result<ScenarioEval> {
    let (reports, catalog) = predict_scenario(
        scenario,
        SplitFilter::Test,
        spatial,
        temporal,
        cfg,
        &mut std::io::sink(),
    )?;

    let mut trace = Vec::new();
    let mut training_sequences = Vec::new();
    let mut scratch = catalog.clone();
    let mut step_labels: Vec<(&TimeStep, Option<String>)> = Vec::new();
    for episode in scenario.episodes_in(Split::Train) {
        let seg = segment_episode(
            episode,
            &spatial.grammar,
            &scenario.lane_groups,
            cfg.lambda,
            &mut scratch,
            Registration::ReadOnly,
        )?;
        for (step, labeled) in episode.steps.iter().zip(&seg.steps) {
            step_labels.push((step, labeled.label.clone()));
        }
        training_sequences.push(seg.sequence.labels.clone());
        trace.push(EpisodeTrace {
            episode: episode.id.clone(),
            split: Split::Train,
            steps: seg.steps.iter().map(|s| s.index).collect(),
            labels: seg.steps.iter().map(|s| s.label.clone()).collect(),
            events: seg.sequence.labels,
        });
    }
    let mut by_episode: Vec<(String, Vec<&super::predict::StepReport>)> = Vec::new();
    for r in &reports {
        match by_episode.last_mut() {
            Some((id, list)) if *id == r.episode => list.push(r),
            _ => by_episode.push((r.episode.clone(), vec![r])),
        }
    }
    for (id, list) in by_episode {
        let episode = scenario
            .episodes
            .iter()
            .find(|e| e.id == id)
            .expect("report for known episode");
        for (step, r) in episode.steps.iter().zip(&list) {
            step_labels.push((step, r.label.clone()));
        }
        let labels: Vec<Option<String>> = list.iter().map(|r| r.label.clone()).collect();
        let events =
            crate::events::rle_compress(&labels.iter().flatten().collect::<Vec<_>>()).labels;
        trace.push(EpisodeTrace {
            episode: id,
            split: Split::Test,
            steps: list.iter().map(|r| r.step).collect(),
            labels,
            events,
        });
    }

    let mut properties = Vec::new();
    let se = spatial.grammar.normalization_error();
    properties.push(PropertyResult::check(
        "spatial-normalization",
        se <= NORMALIZATION_TOL,
        format!("max |row mass - 1| = {se:.3e}"),
    ));
    let te = temporal.pcfg.normalization_error();
    properties.push(PropertyResult::check(
        "temporal-normalization",
        te <= NORMALIZATION_TOL,
        format!("max |row mass - 1| = {te:.3e}"),
    ));
    let sd = largest_drop(&spatial.manifest.log_likelihoods);
    properties.push(PropertyResult::check(
        "spatial-em-monotone",
        sd <= MONOTONE_SLACK,
        format!(
            "{} iterations, largest drop {sd:.3e}",
            spatial.manifest.log_likelihoods.len()
        ),
    ));
    let td = largest_drop(&temporal.manifest.log_likelihoods);
    properties.push(PropertyResult::check(
        "temporal-em-monotone",
        td <= MONOTONE_SLACK,
        format!(
            "{} iterations, largest drop {td:.3e}",
            temporal.manifest.log_likelihoods.len()
        ),
    ));

    let mut labels_by_config: HashMap<Vec<(u32, u64, u64)>, &Option<String>> = HashMap::new();
    let mut incoherent = 0;
    for (step, label) in &step_labels {
        let entry = labels_by_config
            .entry(observation_key(step))
            .or_insert(label);
        if *entry != label {
            incoherent += 1;
        }
    }
    properties.push(PropertyResult::check(
        "same-configuration-coherence",
        incoherent == 0,
        format!("{} steps, {incoherent} inconsistent", step_labels.len()),
    ));

    let stop_event = event_with_leaves(&catalog, &cfg.stop_event_codes);
    match &stop_event {
        Some(label) => {
            let predictor = Predictor::new(spatial, temporal, cfg);
            let violations = stop_sign_violations(&predictor, &training_sequences, label);
            let detail = if violations.is_empty() {
                format!("stop event {label} in every top-{} completion", cfg.top_k)
            } else {
                format!("{} violations; first: {}", violations.len(), violations[0])
            };
            properties.push(PropertyResult::check(
                "stop-sign",
                violations.is_empty(),
                detail,
            ));
        }
        None => properties.push(PropertyResult {
            name: "stop-sign".into(),
            status: Status::Skipped,
            detail: format!("no event with leaves {:?}", cfg.stop_event_codes),
        }),
    }

    Ok(ScenarioEval {
        scenario: scenario.id.clone(),
        training_event_classes: catalog.count(Provenance::SeenInTraining),
        total_event_classes: catalog.len(),
        new_at_test: catalog.count(Provenance::GeneratedAtTest),
        stop_event,
        events: catalog
            .iter()
            .map(|(canonical, info)| EventRow {
                label: info.label.clone(),
                provenance: info.provenance,
                canonical: canonical.to_string(),
            })
            .collect(),
        properties,
        trace,
    })
}

impl EvalReport {
    pub fn new(config: RunConfig, scenarios: Vec<ScenarioEval>) -> Self {
        EvalReport {
            format_version: persist::FORMAT_VERSION,
            config,
            scenarios,
        }
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in &self.scenarios {
            out.push_str(&format!(
                "{}: {} training events, {} total, {} new at test\n",
                s.scenario, s.training_event_classes, s.total_event_classes, s.new_at_test
            ));
            for p in &s.properties {
                let status = match p.status {
                    Status::Pass => "pass",
                    Status::Fail => "FAIL",
                    Status::Skipped => "skip",
                };
                out.push_str(&format!("  [{status}] {:<30} {}\n", p.name, p.detail));
            }
        }
        out
    }
}
