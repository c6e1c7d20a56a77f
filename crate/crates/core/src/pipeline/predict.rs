//! Online testing loop: label each incoming time step, maintain the event
//! prefix of its episode and predict the rest of the episode.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{label_time_step, EventCatalog, Provenance, Registration};
use crate::persist;
use crate::scenario::{
    validate_step, LaneGroup, Observation, Scenario, Split, TimeStep, DEFAULT_DT,
};
use crate::temporal::{predict_episodic, predict_pcfg, Completion, Prediction, Source};

use super::artifacts::{SpatialArtifacts, TemporalArtifacts};
use super::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub prefix: Vec<String>,
    pub source: Source,
    pub completions: Vec<Completion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    fn new(prefix: &[String], prediction: Prediction) -> Self {
        PredictionRecord {
            prefix: prefix.to_vec(),
            source: prediction.source,
            completions: prediction.completions,
            error: None,
        }
    }
}

/// One line of `predict` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub format_version: u32,
    pub episode: String,
    pub step: u64,
    pub label: Option<String>,
    pub new_event: bool,
    pub near_tie: bool,
    pub canonical: Option<String>,
    pub combinations: usize,
    /// Episodic prediction first, PCFG prediction second.
    pub predictions: Vec<PredictionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StepReport {
    pub fn prediction(&self, source: Source) -> Option<&PredictionRecord> {
        self.predictions.iter().find(|p| p.source == source)
    }
}

/// Streaming predictor over the artifacts of both training phases.
pub struct Predictor<'a> {
    spatial: &'a SpatialArtifacts,
    temporal: &'a TemporalArtifacts,
    cfg: &'a RunConfig,
    catalog: EventCatalog,
    prefixes: HashMap<String, Vec<String>>,
}

impl<'a> Predictor<'a> {
    pub fn new(
        spatial: &'a SpatialArtifacts,
        temporal: &'a TemporalArtifacts,
        cfg: &'a RunConfig,
    ) -> Self {
        Predictor {
            spatial,
            temporal,
            cfg,
            catalog: spatial.catalog.clone(),
            prefixes: HashMap::new(),
        }
    }

    pub fn catalog(&self) -> &EventCatalog {
        &self.catalog
    }

    pub fn into_catalog(self) -> EventCatalog {
        self.catalog
    }

    /// Current event prefix of an episode.
    pub fn prefix(&self, episode: &str) -> &[String] {
        self.prefixes.get(episode).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn process(
        &mut self,
        episode: &str,
        step: &TimeStep,
        lane_groups: &[LaneGroup],
    ) -> StepReport {
        let mode = if self.cfg.allow_new_events {
            Registration::Register(Provenance::GeneratedAtTest)
        } else {
            Registration::ReadOnly
        };
        let labeled = label_time_step(
            &self.spatial.grammar,
            step,
            lane_groups,
            self.cfg.lambda,
            &mut self.catalog,
            mode,
        );
        let mut report = StepReport {
            format_version: persist::FORMAT_VERSION,
            episode: episode.to_string(),
            step: step.index,
            label: None,
            new_event: false,
            near_tie: false,
            canonical: None,
            combinations: 0,
            predictions: Vec::new(),
            error: None,
        };
        match labeled {
            Ok(l) => {
                if let Some(label) = &l.label {
                    let prefix = self.prefixes.entry(episode.to_string()).or_default();
                    if prefix.last() != Some(label) {
                        prefix.push(label.clone());
                    }
                } else {
                    report.error = Some(format!("tree {} matches no known event", l.canonical));
                }
                report.label = l.label;
                report.new_event = l.new_event;
                report.near_tie = l.near_tie;
                report.canonical = Some(l.canonical);
                report.combinations = l.combinations;
            }
            Err(e) => report.error = Some(e.to_string()),
        }
        let prefix = self.prefix(episode).to_vec();
        report.predictions = self.predict(&prefix);
        report
    }

    pub fn predict(&self, prefix: &[String]) -> Vec<PredictionRecord> {
        let episodic = predict_episodic(&self.temporal.store, prefix, self.cfg.top_k);
        let pcfg = match predict_pcfg(
            &self.temporal.pcfg,
            prefix,
            self.cfg.max_len,
            self.cfg.top_k,
            self.cfg.enumeration_budget,
        ) {
            Ok(p) => PredictionRecord::new(prefix, p),
            Err(e) => PredictionRecord {
                error: Some(e.to_string()),
                ..PredictionRecord::new(prefix, Prediction::empty(Source::Pcfg))
            },
        };
        vec![PredictionRecord::new(prefix, episodic), pcfg]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Train,
    Test,
    All,
}

impl SplitFilter {
    fn admits(self, split: Split) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Train => split == Split::Train,
            SplitFilter::Test => split == Split::Test,
        }
    }
}

fn emit(sink: &mut dyn Write, report: &StepReport) -> Result<()> {
    let line = serde_json::to_string(report).expect("reports serialize");
    writeln!(sink, "{line}").map_err(|e| Error::Io {
        context: "writing step report".into(),
        source: e,
    })
}

/// Runs the testing loop over the selected episodes of a scenario, writing
/// each report to `sink` as soon as it is produced.
pub fn predict_scenario(
    scenario: &Scenario,
    filter: SplitFilter,
    spatial: &SpatialArtifacts,
    temporal: &TemporalArtifacts,
    cfg: &RunConfig,
    sink: &mut dyn Write,
) -> Result<(Vec<StepReport>, EventCatalog)> {
    spatial.check_compatible(scenario)?;
    let mut predictor = Predictor::new(spatial, temporal, cfg);
    let mut reports = Vec::new();
    for episode in scenario.episodes.iter().filter(|e| filter.admits(e.split)) {
        for step in &episode.steps {
            let report = predictor.process(&episode.id, step, &scenario.lane_groups);
            emit(sink, &report)?;
            reports.push(report);
        }
    }
    Ok((reports, predictor.into_catalog()))
}

/// One line of a step stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamRecord {
    pub episode: String,
    pub index: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub observations: Vec<Observation>,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

/// Runs the testing loop over line-delimited step records, validated
/// against the training vocabulary.
pub fn predict_stream(
    input: &mut dyn BufRead,
    spatial: &SpatialArtifacts,
    temporal: &TemporalArtifacts,
    cfg: &RunConfig,
    sink: &mut dyn Write,
) -> Result<(Vec<StepReport>, EventCatalog)> {
    let vocabulary = &spatial.manifest.vocabulary;
    let lane_groups = &spatial.manifest.lane_groups;
    let mut predictor = Predictor::new(spatial, temporal, cfg);
    let mut last_index: HashMap<String, u64> = HashMap::new();
    let mut reports = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            context: "reading step stream".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let context = format!("step stream line {}", n + 1);
        let record: StreamRecord =
            serde_json::from_str(&line).map_err(|e| Error::json(&context, e))?;
        if last_index
            .get(&record.episode)
            .is_some_and(|&i| record.index <= i)
        {
            return Err(Error::Validation(format!(
                "{context}: step index {} of episode {} is not increasing",
                record.index, record.episode
            )));
        }
        last_index.insert(record.episode.clone(), record.index);
        let step = TimeStep {
            index: record.index,
            dt: record.dt,
            observations: record.observations,
        };
        validate_step(vocabulary, &step)
            .map_err(|msg| Error::Validation(format!("{context}: {msg}")))?;
        let report = predictor.process(&record.episode, &step, lane_groups);
        emit(sink, &report)?;
        reports.push(report);
    }
    Ok((reports, predictor.into_catalog()))
}
