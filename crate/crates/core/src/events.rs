//! Event segmentation: time steps with identical best parse trees form one
//! event; episodes become run-length compressed strings of event labels.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{self, Versioned};
use crate::scenario::{
    build_association_matrix, enumerate_combinations, Episode, LaneGroup, Scenario, Split, TimeStep,
};
use crate::spatial::{most_probable_parse, Parse, SpatialGrammar, NEAR_TIE};
use crate::tree::ParseTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SeenInTraining,
    GeneratedAtTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInfo {
    pub label: String,
    pub provenance: Provenance,
}

/// Canonical tree text to event label, in insertion order. Labels are
/// `E1`, `E2`, ... and are never removed or re-mapped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventCatalog {
    events: IndexMap<String, EventInfo>,
}

impl EventCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn get(&self, canonical: &str) -> Option<&EventInfo> {
        self.events.get(canonical)
    }

    /// Returns the label and whether it was newly created.
    pub fn register(&mut self, canonical: &str, provenance: Provenance) -> (String, bool) {
        if let Some(info) = self.events.get(canonical) {
            return (info.label.clone(), false);
        }
        let label = format!("E{}", self.events.len() + 1);
        self.events.insert(
            canonical.to_string(),
            EventInfo {
                label: label.clone(),
                provenance,
            },
        );
        (label, true)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EventInfo)> {
        self.events.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.events.values().map(|e| e.label.as_str())
    }

    pub fn labels_with(&self, provenance: Provenance) -> Vec<String> {
        self.events
            .values()
            .filter(|e| e.provenance == provenance)
            .map(|e| e.label.clone())
            .collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.events
            .values()
            .filter(|e| e.provenance == provenance)
            .count()
    }

    pub fn canonical_of(&self, label: &str) -> Option<&str> {
        self.events
            .iter()
            .find(|(_, e)| e.label == label)
            .map(|(k, _)| k.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    format_version: u32,
    events: IndexMap<String, EventInfo>,
}

impl Versioned for CatalogFile {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

impl EventCatalog {
    pub fn to_json(&self) -> String {
        persist::to_json(&CatalogFile {
            format_version: persist::FORMAT_VERSION,
            events: self.events.clone(),
        })
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let file: CatalogFile = persist::from_json(text, context)?;
        for (pos, (canonical, info)) in file.events.iter().enumerate() {
            if info.label != format!("E{}", pos + 1) {
                return Err(Error::Validation(format!(
                    "{context}: event {pos} has label {}, expected E{}",
                    info.label,
                    pos + 1
                )));
            }
            canonical.parse::<ParseTree>()?;
        }
        Ok(EventCatalog {
            events: file.events,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelOutcome {
    Existing(String),
    New(String),
    NoMatch,
}

impl LabelOutcome {
    pub fn label(&self) -> Option<&str> {
        match self {
            LabelOutcome::Existing(l) | LabelOutcome::New(l) => Some(l),
            LabelOutcome::NoMatch => None,
        }
    }
}

/// Test-time labeling: unknown trees become new events only when `allow_new`.
pub fn label_step(catalog: &mut EventCatalog, tree: &ParseTree, allow_new: bool) -> LabelOutcome {
    let canonical = tree.canonical_form();
    if let Some(info) = catalog.get(&canonical) {
        return LabelOutcome::Existing(info.label.clone());
    }
    if !allow_new {
        return LabelOutcome::NoMatch;
    }
    let (label, _) = catalog.register(&canonical, Provenance::GeneratedAtTest);
    LabelOutcome::New(label)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSequence {
    pub episode_id: String,
    pub labels: Vec<String>,
    pub durations: Vec<usize>,
}

pub fn rle_compress<S: AsRef<str>>(labels: &[S]) -> EventSequence {
    let mut seq = EventSequence::default();
    for label in labels {
        let label = label.as_ref();
        match seq.labels.last() {
            Some(last) if last == label => *seq.durations.last_mut().unwrap() += 1,
            _ => {
                seq.labels.push(label.to_string());
                seq.durations.push(1);
            }
        }
    }
    seq
}

/// Best parse over the lane-group combinations of a raw step. The highest
/// score wins; equal scores go to the smaller canonical form.
#[derive(Debug, Clone)]
pub struct StepParse {
    pub parse: Parse,
    pub combinations: usize,
    /// Runner-up tree (within this or another combination) within `NEAR_TIE`.
    pub near_tie: bool,
}

pub fn parse_step(
    grammar: &SpatialGrammar,
    step: &TimeStep,
    lane_groups: &[LaneGroup],
    lambda: f64,
) -> Result<StepParse> {
    let combos = enumerate_combinations(step, lane_groups);
    let mut parses = Vec::with_capacity(combos.len());
    for reduced in &combos {
        let assoc = build_association_matrix(reduced, grammar.v(), lambda)?;
        parses.push(most_probable_parse(grammar, &reduced.terminals(), &assoc)?);
    }
    let mut keyed: Vec<(String, Parse)> = parses
        .into_iter()
        .map(|p| (p.canonical_form(), p))
        .collect();
    keyed.sort_by(|(ca, a), (cb, b)| b.score.total_cmp(&a.score).then_with(|| ca.cmp(cb)));
    let (best_canon, best) = keyed.swap_remove(0);
    let near_tie = best.near_tie()
        || keyed
            .iter()
            .any(|(c, p)| *c != best_canon && best.score - p.score < NEAR_TIE);
    Ok(StepParse {
        parse: best,
        combinations: combos.len(),
        near_tie,
    })
}

/// How unknown trees are treated while segmenting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registration {
    /// Unknown trees get no label.
    ReadOnly,
    /// Unknown trees are added to the catalog with this provenance.
    Register(Provenance),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLabel {
    pub index: u64,
    pub label: Option<String>,
    pub canonical: String,
    pub score: f64,
    pub new_event: bool,
    pub near_tie: bool,
    pub combinations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedEpisode {
    pub sequence: EventSequence,
    pub steps: Vec<StepLabel>,
}

pub fn label_time_step(
    grammar: &SpatialGrammar,
    step: &TimeStep,
    lane_groups: &[LaneGroup],
    lambda: f64,
    catalog: &mut EventCatalog,
    mode: Registration,
) -> Result<StepLabel> {
    let sp = parse_step(grammar, step, lane_groups, lambda)?;
    let canonical = sp.parse.canonical_form();
    let (label, new_event) = match (catalog.get(&canonical), mode) {
        (Some(info), _) => (Some(info.label.clone()), false),
        (None, Registration::ReadOnly) => (None, false),
        (None, Registration::Register(provenance)) => {
            let (label, _) = catalog.register(&canonical, provenance);
            (Some(label), true)
        }
    };
    Ok(StepLabel {
        index: step.index,
        label,
        canonical,
        score: sp.parse.score,
        new_event,
        near_tie: sp.near_tie,
        combinations: sp.combinations,
    })
}

/// Parses and labels every step of an episode, then compresses the labels.
/// Steps left without a label are not counted in the durations.
pub fn segment_episode(
    episode: &Episode,
    grammar: &SpatialGrammar,
    lane_groups: &[LaneGroup],
    lambda: f64,
    catalog: &mut EventCatalog,
    mode: Registration,
) -> Result<SegmentedEpisode> {
    let mut steps = Vec::with_capacity(episode.steps.len());
    for step in &episode.steps {
        let labeled = label_time_step(grammar, step, lane_groups, lambda, catalog, mode).map_err(
            |e| match e {
                Error::Unparseable(msg) => {
                    Error::Unparseable(format!("episode {} step {}: {msg}", episode.id, step.index))
                }
                other => other,
            },
        )?;
        steps.push(labeled);
    }
    let labels: Vec<&str> = steps.iter().filter_map(|s| s.label.as_deref()).collect();
    let mut sequence = rle_compress(&labels);
    sequence.episode_id = episode.id.clone();
    Ok(SegmentedEpisode { sequence, steps })
}

/// Builds the training catalog from the training episodes of every scenario,
/// in scenario, episode and step order.
pub fn build_catalog(
    grammar: &SpatialGrammar,
    scenarios: &[Scenario],
    lambda: f64,
) -> Result<(EventCatalog, Vec<SegmentedEpisode>)> {
    let mut catalog = EventCatalog::new();
    let mut segmented = Vec::new();
    for scenario in scenarios {
        for episode in scenario.episodes_in(Split::Train) {
            segmented.push(segment_episode(
                episode,
                grammar,
                &scenario.lane_groups,
                lambda,
                &mut catalog,
                Registration::Register(Provenance::SeenInTraining),
            )?);
        }
    }
    Ok((catalog, segmented))
}
