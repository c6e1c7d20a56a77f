//! Trained artifacts of both phases, their manifests and on-disk layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{
    build_catalog, segment_episode, EventCatalog, EventSequence, Provenance, Registration,
};
use crate::persist::{self, Versioned};
use crate::scenario::{parse_scenario, LaneGroup, Scenario, Split, Vocabulary};
use crate::spatial::{merged_vocabulary, train_on_instances, training_instances, SpatialGrammar};
use crate::temporal::{learn_temporal_pcfg, EpisodicStore, TemporalPcfg};

use super::config::RunConfig;

pub const SPATIAL_GRAMMAR: &str = "spatial_grammar.json";
pub const EVENT_CATALOG: &str = "event_catalog.json";
pub const SPATIAL_MANIFEST: &str = "spatial_manifest.json";
pub const TEMPORAL_PCFG: &str = "temporal_pcfg.json";
pub const EPISODIC_STORE: &str = "episodic_store.json";
pub const EVENT_SEQUENCES: &str = "event_sequences.jsonl";
pub const TEMPORAL_MANIFEST: &str = "temporal_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &str, bytes: &[u8]) -> Self {
        InputDigest {
            path: path.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// Loads and validates scenario files, recording a digest of each.
pub fn load_inputs(paths: &[PathBuf]) -> Result<(Vec<Scenario>, Vec<InputDigest>)> {
    let mut scenarios = Vec::with_capacity(paths.len());
    let mut digests = Vec::with_capacity(paths.len());
    for path in paths {
        let text = persist::read_text(path)?;
        let name = path.display().to_string();
        scenarios.push(parse_scenario(&text, &name)?);
        digests.push(InputDigest::of(&name, text.as_bytes()));
    }
    Ok((scenarios, digests))
}

/// Lane groups of several scenarios; a name shared by two scenarios must list the same codes.
pub fn merged_lane_groups(scenarios: &[Scenario]) -> Result<Vec<LaneGroup>> {
    let mut out: Vec<LaneGroup> = Vec::new();
    for group in scenarios.iter().flat_map(|s| &s.lane_groups) {
        match out.iter().find(|g| g.name == group.name) {
            Some(existing) if existing.codes != group.codes => {
                return Err(Error::Validation(format!(
                    "lane group {} is defined differently across scenarios",
                    group.name
                )))
            }
            Some(_) => {}
            None => out.push(group.clone()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialManifest {
    pub format_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    pub vocabulary: Vocabulary,
    pub lane_groups: Vec<LaneGroup>,
    pub training_instances: usize,
    pub iterations: usize,
    pub log_likelihoods: Vec<f64>,
    pub final_log_likelihood: f64,
    pub event_classes: usize,
}

impl Versioned for SpatialManifest {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

#[derive(Debug, Clone)]
pub struct SpatialArtifacts {
    pub grammar: SpatialGrammar,
    pub catalog: EventCatalog,
    pub manifest: SpatialManifest,
}

fn training_step_count(scenarios: &[Scenario]) -> usize {
    scenarios
        .iter()
        .flat_map(|s| s.episodes_in(Split::Train))
        .map(|e| e.steps.len())
        .sum()
}

impl SpatialArtifacts {
    pub fn train(
        scenarios: &[Scenario],
        inputs: Vec<InputDigest>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        if training_step_count(scenarios) == 0 {
            return Err(Error::Validation(
                "no training time steps in the given scenarios".into(),
            ));
        }
        let vocabulary = merged_vocabulary(scenarios)?;
        let lane_groups = merged_lane_groups(scenarios)?;
        let scfg = cfg.spatial();
        let instances = training_instances(scenarios, vocabulary.len(), scfg.lambda)?;
        let trained = train_on_instances(&instances, vocabulary.len(), &scfg)?;
        let (catalog, _) = build_catalog(&trained.grammar, scenarios, scfg.lambda)?;
        let manifest = SpatialManifest {
            format_version: persist::FORMAT_VERSION,
            command: "train-spatial".into(),
            config: cfg.clone(),
            inputs,
            vocabulary,
            lane_groups,
            training_instances: instances.len(),
            iterations: trained.log_likelihoods.len(),
            final_log_likelihood: *trained
                .log_likelihoods
                .last()
                .expect("at least one iteration"),
            log_likelihoods: trained.log_likelihoods,
            event_classes: catalog.len(),
        };
        Ok(SpatialArtifacts {
            grammar: trained.grammar,
            catalog,
            manifest,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        persist::write_text(&dir.join(SPATIAL_GRAMMAR), &self.grammar.to_json())?;
        persist::write_text(&dir.join(EVENT_CATALOG), &self.catalog.to_json())?;
        persist::write_text(
            &dir.join(SPATIAL_MANIFEST),
            &persist::to_json(&self.manifest),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let grammar =
            SpatialGrammar::from_json(&read_dependency(dir, SPATIAL_GRAMMAR)?, SPATIAL_GRAMMAR)?;
        let catalog =
            EventCatalog::from_json(&read_dependency(dir, EVENT_CATALOG)?, EVENT_CATALOG)?;
        let manifest: SpatialManifest =
            persist::from_json(&read_dependency(dir, SPATIAL_MANIFEST)?, SPATIAL_MANIFEST)?;
        if manifest.vocabulary.len() != grammar.v() {
            return Err(Error::Validation(format!(
                "{SPATIAL_MANIFEST}: vocabulary size {} does not match grammar ({})",
                manifest.vocabulary.len(),
                grammar.v()
            )));
        }
        Ok(SpatialArtifacts {
            grammar,
            catalog,
            manifest,
        })
    }

    pub fn digests(&self) -> Vec<InputDigest> {
        [
            (SPATIAL_GRAMMAR, self.grammar.to_json()),
            (EVENT_CATALOG, self.catalog.to_json()),
            (SPATIAL_MANIFEST, persist::to_json(&self.manifest)),
        ]
        .iter()
        .map(|(name, text)| InputDigest::of(name, text.as_bytes()))
        .collect()
    }

    /// Scenario vocabulary must agree with the training vocabulary.
    pub fn check_compatible(&self, scenario: &Scenario) -> Result<()> {
        let merged = self.manifest.vocabulary.merge(&scenario.vocabulary)?;
        if merged.len() != self.manifest.vocabulary.len() {
            return Err(Error::Validation(format!(
                "scenario {} uses codes beyond the {} the spatial grammar was trained on",
                scenario.id,
                self.manifest.vocabulary.len()
            )));
        }
        Ok(())
    }
}

fn read_dependency(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Dependency(format!(
            "{} not found; run the training phase that produces it first",
            path.display()
        )));
    }
    persist::read_text(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalManifest {
    pub format_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<InputDigest>,
    pub spatial_artifacts: Vec<InputDigest>,
    pub alphabet: Vec<String>,
    pub episodes: usize,
    pub unique_sequences: usize,
    pub iterations: usize,
    pub log_likelihoods: Vec<f64>,
    pub final_log_likelihood: f64,
}

impl Versioned for TemporalManifest {
    fn format_version(&self) -> u32 {
        self.format_version
    }
}

#[derive(Debug, Clone)]
pub struct TemporalArtifacts {
    pub pcfg: TemporalPcfg,
    pub store: EpisodicStore,
    pub sequences: Vec<EventSequence>,
    pub manifest: TemporalManifest,
}

/// Segments every training episode against the spatial catalog, read-only.
pub fn segment_training(
    spatial: &SpatialArtifacts,
    scenarios: &[Scenario],
    lambda: f64,
) -> Result<Vec<EventSequence>> {
    let mut catalog = spatial.catalog.clone();
    let mut out = Vec::new();
    for scenario in scenarios {
        spatial.check_compatible(scenario)?;
        for episode in scenario.episodes_in(Split::Train) {
            let seg = segment_episode(
                episode,
                &spatial.grammar,
                &scenario.lane_groups,
                lambda,
                &mut catalog,
                Registration::ReadOnly,
            )?;
            if let Some(step) = seg.steps.iter().find(|s| s.label.is_none()) {
                return Err(Error::Validation(format!(
                    "episode {} step {}: tree {} is not in the event catalog; retrain the spatial phase with this scenario",
                    episode.id, step.index, step.canonical
                )));
            }
            out.push(seg.sequence);
        }
    }
    if out.is_empty() {
        return Err(Error::Validation(
            "no training episodes in the given scenarios".into(),
        ));
    }
    Ok(out)
}

impl TemporalArtifacts {
    pub fn train(
        scenarios: &[Scenario],
        spatial: &SpatialArtifacts,
        inputs: Vec<InputDigest>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let sequences = segment_training(spatial, scenarios, cfg.lambda)?;
        let alphabet = spatial.catalog.labels_with(Provenance::SeenInTraining);
        let trained = learn_temporal_pcfg(&sequences, &alphabet, &cfg.temporal())?;
        let mut store = EpisodicStore::new();
        for seq in &sequences {
            store.store_episode(seq)?;
        }
        let manifest = TemporalManifest {
            format_version: persist::FORMAT_VERSION,
            command: "train-temporal".into(),
            config: cfg.clone(),
            inputs,
            spatial_artifacts: spatial.digests(),
            alphabet,
            episodes: sequences.len(),
            unique_sequences: store.len(),
            iterations: trained.log_likelihoods.len(),
            final_log_likelihood: *trained
                .log_likelihoods
                .last()
                .expect("at least one iteration"),
            log_likelihoods: trained.log_likelihoods,
        };
        Ok(TemporalArtifacts {
            pcfg: trained.pcfg,
            store,
            sequences,
            manifest,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        persist::write_text(&dir.join(TEMPORAL_PCFG), &self.pcfg.to_json())?;
        persist::write_text(&dir.join(EPISODIC_STORE), &self.store.to_json())?;
        let mut lines = String::new();
        for seq in &self.sequences {
            lines.push_str(&serde_json::to_string(seq).expect("event sequences serialize"));
            lines.push('\n');
        }
        persist::write_text(&dir.join(EVENT_SEQUENCES), &lines)?;
        persist::write_text(
            &dir.join(TEMPORAL_MANIFEST),
            &persist::to_json(&self.manifest),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let pcfg = TemporalPcfg::from_json(&read_dependency(dir, TEMPORAL_PCFG)?, TEMPORAL_PCFG)?;
        let store =
            EpisodicStore::from_json(&read_dependency(dir, EPISODIC_STORE)?, EPISODIC_STORE)?;
        let manifest: TemporalManifest =
            persist::from_json(&read_dependency(dir, TEMPORAL_MANIFEST)?, TEMPORAL_MANIFEST)?;
        let mut sequences = Vec::new();
        for (n, line) in read_dependency(dir, EVENT_SEQUENCES)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            sequences.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::json(format!("{EVENT_SEQUENCES} record {}", n + 1), e))?,
            );
        }
        Ok(TemporalArtifacts {
            pcfg,
            store,
            sequences,
            manifest,
        })
    }
}
