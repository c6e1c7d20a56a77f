//! Episodes, events and time steps: the scene data model, the scenario
//! fixture format, association matrices and multi-object expansion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElementKind {
    SelfState,
    MovingAgent,
    StaticSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextElement {
    pub code: u32,
    pub kind: ElementKind,
    pub description: String,
}

/// Context elements with codes `1..=len`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<ContextElement>", into = "Vec<ContextElement>")]
pub struct Vocabulary {
    elements: Vec<ContextElement>,
}

impl TryFrom<Vec<ContextElement>> for Vocabulary {
    type Error = Error;

    fn try_from(elements: Vec<ContextElement>) -> Result<Self> {
        Vocabulary::new(elements)
    }
}

impl From<Vocabulary> for Vec<ContextElement> {
    fn from(v: Vocabulary) -> Self {
        v.elements
    }
}

impl Vocabulary {
    pub fn new(mut elements: Vec<ContextElement>) -> Result<Self> {
        elements.sort_by_key(|e| e.code);
        for (pos, element) in elements.iter().enumerate() {
            let expected = pos as u32 + 1;
            if element.code != expected {
                return Err(Error::Validation(format!(
                    "vocabulary codes must be unique and contiguous from 1; expected code {expected}, found {}",
                    element.code
                )));
            }
        }
        Ok(Vocabulary { elements })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, code: u32) -> Option<&ContextElement> {
        if code == 0 {
            return None;
        }
        self.elements.get(code as usize - 1)
    }

    pub fn kind(&self, code: u32) -> Option<ElementKind> {
        self.get(code).map(|e| e.kind)
    }

    pub fn elements(&self) -> &[ContextElement] {
        &self.elements
    }

    /// Union of two vocabularies that agree on every shared code.
    pub fn merge(&self, other: &Vocabulary) -> Result<Vocabulary> {
        let mut merged = self.elements.clone();
        for element in &other.elements {
            match self.get(element.code) {
                Some(existing) if existing.kind != element.kind => {
                    return Err(Error::Validation(format!(
                        "vocabulary conflict for code {}: {:?} vs {:?}",
                        element.code, existing.kind, element.kind
                    )));
                }
                Some(_) => {}
                None => merged.push(element.clone()),
            }
        }
        Vocabulary::new(merged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGroup {
    pub name: String,
    pub codes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub code: u32,
    /// Longitudinal distance to the self-car, meters.
    pub dy: f64,
    /// Lateral distance to the self-car, meters.
    pub dx: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeStep {
    pub index: u64,
    pub dt: f64,
    pub observations: Vec<Observation>,
}

impl TimeStep {
    /// Active codes in ascending order: the terminal sequence a step is parsed as.
    pub fn terminals(&self) -> Vec<u32> {
        let mut codes: Vec<u32> = self.observations.iter().map(|o| o.code).collect();
        codes.sort_unstable();
        codes
    }

    pub fn has_duplicate_codes(&self) -> bool {
        let mut seen = BTreeSet::new();
        !self.observations.iter().all(|o| seen.insert(o.code))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub scenario_id: String,
    pub split: Split,
    pub steps: Vec<TimeStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub vocabulary: Vocabulary,
    pub lane_groups: Vec<LaneGroup>,
    pub episodes: Vec<Episode>,
}

impl Scenario {
    pub fn episodes_in(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }
}

// On-disk layout of a scenario document.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub id: String,
    pub vocabulary: Vec<ContextElement>,
    #[serde(default)]
    pub lane_groups: Vec<LaneGroup>,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub id: String,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub split: Split,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub index: u64,
    pub observations: Vec<Observation>,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text, &path.display().to_string())
}

/// Parses and validates a scenario document; `context` names the source in errors.
pub fn parse_scenario(text: &str, context: &str) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
    Scenario::from_file(file).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{context}: {msg}")),
        other => other,
    })
}

impl Scenario {
    pub fn from_file(file: ScenarioFile) -> Result<Scenario> {
        let vocabulary = Vocabulary::new(file.vocabulary)?;
        validate_lane_groups(&vocabulary, &file.lane_groups)?;
        let mut episodes = Vec::with_capacity(file.episodes.len());
        for record in file.episodes {
            if !(record.dt > 0.0 && record.dt.is_finite()) {
                return Err(Error::Validation(format!(
                    "episode {}: dt must be positive, got {}",
                    record.id, record.dt
                )));
            }
            if record.steps.is_empty() {
                return Err(Error::Validation(format!(
                    "episode {} has no steps",
                    record.id
                )));
            }
            let mut steps = Vec::with_capacity(record.steps.len());
            let mut previous: Option<u64> = None;
            for step in record.steps {
                if previous.is_some_and(|p| step.index <= p) {
                    return Err(Error::Validation(format!(
                        "episode {}: step index {} is not strictly increasing",
                        record.id, step.index
                    )));
                }
                previous = Some(step.index);
                let step = TimeStep {
                    index: step.index,
                    dt: record.dt,
                    observations: step.observations,
                };
                validate_step(&vocabulary, &step).map_err(|msg| {
                    Error::Validation(format!("episode {}, step {}: {msg}", record.id, step.index))
                })?;
                steps.push(step);
            }
            episodes.push(Episode {
                id: record.id,
                scenario_id: file.id.clone(),
                split: record.split,
                steps,
            });
        }
        Ok(Scenario {
            id: file.id,
            vocabulary,
            lane_groups: file.lane_groups,
            episodes,
        })
    }
}

fn validate_lane_groups(vocabulary: &Vocabulary, groups: &[LaneGroup]) -> Result<()> {
    let mut owner: BTreeMap<u32, &str> = BTreeMap::new();
    for group in groups {
        for &code in &group.codes {
            match vocabulary.kind(code) {
                Some(ElementKind::MovingAgent) => {}
                Some(kind) => {
                    return Err(Error::Validation(format!(
                        "lane group {}: code {code} is {kind:?}, not a moving agent",
                        group.name
                    )))
                }
                None => {
                    return Err(Error::Validation(format!(
                        "lane group {}: unknown code {code}",
                        group.name
                    )))
                }
            }
            if let Some(other) = owner.insert(code, &group.name) {
                return Err(Error::Validation(format!(
                    "code {code} belongs to both lane groups {other} and {}",
                    group.name
                )));
            }
        }
    }
    for element in vocabulary.elements() {
        if element.kind == ElementKind::MovingAgent && !owner.contains_key(&element.code) {
            return Err(Error::Validation(format!(
                "moving-agent code {} is not covered by any lane group",
                element.code
            )));
        }
    }
    Ok(())
}

/// Checks a raw time step against the vocabulary. Several observations may
/// share a moving-agent code (a group of cars); self-state and static-sign
/// codes appear at most once.
pub fn validate_step(vocabulary: &Vocabulary, step: &TimeStep) -> std::result::Result<(), String> {
    let mut seen = BTreeSet::new();
    let mut has_self = false;
    for obs in &step.observations {
        let kind = vocabulary
            .kind(obs.code)
            .ok_or_else(|| format!("unknown code {}", obs.code))?;
        if !(obs.dx.is_finite() && obs.dy.is_finite()) {
            return Err(format!("code {} has a non-finite distance", obs.code));
        }
        match kind {
            ElementKind::SelfState | ElementKind::StaticSign => {
                if obs.dx != 0.0 || obs.dy != 0.0 {
                    return Err(format!(
                        "code {} ({kind:?}) must have dy = dx = 0",
                        obs.code
                    ));
                }
                if !seen.insert(obs.code) {
                    return Err(format!("duplicate code {}", obs.code));
                }
                has_self |= kind == ElementKind::SelfState;
            }
            ElementKind::MovingAgent => {}
        }
    }
    if !has_self {
        return Err("no self-state observation".to_string());
    }
    Ok(())
}

/// Symmetric `V x V` association weights for one time step, addressed by code.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl AssociationMatrix {
    pub fn zeros(size: usize) -> Self {
        AssociationMatrix {
            size,
            entries: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Entry for codes `p`, `q` (1-based).
    pub fn get(&self, p: u32, q: u32) -> f64 {
        self.entries[(p as usize - 1) * self.size + (q as usize - 1)]
    }

    fn set_pair(&mut self, p: u32, q: u32, value: f64) {
        let (p, q) = (p as usize - 1, q as usize - 1);
        self.entries[p * self.size + q] = value;
        self.entries[q * self.size + p] = value;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Presence-gated exponential kernel over L1 distance:
/// `exp(-(|dy_p - dy_q| + |dx_p - dx_q|) / lambda)` for active pairs, 1 on the
/// active diagonal, 0 elsewhere.
pub fn build_association_matrix(
    step: &TimeStep,
    size: usize,
    lambda: f64,
) -> Result<AssociationMatrix> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Argument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if step.has_duplicate_codes() {
        return Err(Error::Argument(format!(
            "step {} has several observations of one code; expand combinations first",
            step.index
        )));
    }
    let mut matrix = AssociationMatrix::zeros(size);
    for (a, p) in step.observations.iter().enumerate() {
        if p.code == 0 || p.code as usize > size {
            return Err(Error::Argument(format!(
                "code {} outside vocabulary of size {size}",
                p.code
            )));
        }
        matrix.set_pair(p.code, p.code, 1.0);
        for q in &step.observations[..a] {
            let distance = (p.dy - q.dy).abs() + (p.dx - q.dx).abs();
            matrix.set_pair(p.code, q.code, (-distance / lambda).exp());
        }
    }
    Ok(matrix)
}

/// Expands a step with several agents per lane group into reduced steps that
/// keep one agent from each represented group. Output order is the product
/// over groups in group order, members in code order, last group fastest.
pub fn enumerate_combinations(step: &TimeStep, lane_groups: &[LaneGroup]) -> Vec<TimeStep> {
    let group_of = |code: u32| lane_groups.iter().position(|g| g.codes.contains(&code));

    let mut fixed = Vec::new();
    let mut members: Vec<Vec<Observation>> = vec![Vec::new(); lane_groups.len()];
    for obs in &step.observations {
        match group_of(obs.code) {
            Some(g) => members[g].push(*obs),
            None => fixed.push(*obs),
        }
    }
    for group in &mut members {
        group.sort_by_key(|o| o.code);
    }
    let choices: Vec<&Vec<Observation>> = members.iter().filter(|m| !m.is_empty()).collect();
    if choices.is_empty() {
        return vec![step.clone()];
    }

    let total: usize = choices.iter().map(|c| c.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut cursor = vec![0usize; choices.len()];
    loop {
        let mut observations = fixed.clone();
        observations.extend(choices.iter().zip(&cursor).map(|(c, &i)| c[i]));
        observations.sort_by_key(|o| o.code);
        out.push(TimeStep {
            index: step.index,
            dt: step.dt,
            observations,
        });

        // odometer, last group fastest
        let mut g = choices.len();
        loop {
            if g == 0 {
                return out;
            }
            g -= 1;
            cursor[g] += 1;
            if cursor[g] < choices[g].len() {
                break;
            }
            cursor[g] = 0;
        }
    }
}
