use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist;
use crate::scenario::DEFAULT_LAMBDA;
use crate::spatial::{self, SpatialConfig};
use crate::temporal::{self, TemporalConfig};

/// Environment variable selecting deterministic mode; on unless set to
/// `0`, `false`, `off` or `no`.
pub const DETERMINISTIC_ENV: &str = "SEMMEM_DETERMINISTIC";

/// Settings shared by every subcommand. Echoed into each artifact manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Spatial grammar nonterminals.
    pub nonterminals: usize,
    /// Temporal PCFG nonterminals.
    pub temporal_nonterminals: usize,
    pub spatial_seed: u64,
    pub temporal_seed: u64,
    /// Association kernel decay length, meters.
    pub lambda: f64,
    /// Longest time step (in active elements) accepted by spatial training.
    pub max_step_len: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Most strings the PCFG predictor may enumerate per query.
    pub enumeration_budget: u64,
    /// Prediction horizon: total episode length in events, prefix included.
    pub max_len: usize,
    pub top_k: usize,
    pub allow_new_events: bool,
    pub deterministic: bool,
    /// Leaf codes of the event checked by the stop-sign property in `eval`.
    pub stop_event_codes: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            nonterminals: spatial::DEFAULT_NONTERMINALS,
            temporal_nonterminals: temporal::DEFAULT_NONTERMINALS,
            spatial_seed: spatial::DEFAULT_SEED,
            temporal_seed: spatial::DEFAULT_SEED,
            lambda: DEFAULT_LAMBDA,
            max_step_len: spatial::DEFAULT_MAX_LEN,
            max_iters: spatial::DEFAULT_MAX_ITERS,
            tol: spatial::DEFAULT_TOL,
            enumeration_budget: temporal::DEFAULT_BUDGET,
            max_len: 6,
            top_k: 3,
            allow_new_events: true,
            deterministic: true,
            stop_event_codes: vec![2, 9],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = persist::read_text(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.spatial_seed = seed;
            self.temporal_seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(format!("config: {what}")))
            }
        };
        check(
            (1..=64).contains(&self.nonterminals),
            "nonterminals must be in 1..=64",
        )?;
        check(
            (1..=64).contains(&self.temporal_nonterminals),
            "temporal_nonterminals must be in 1..=64",
        )?;
        check(
            self.lambda > 0.0 && self.lambda.is_finite(),
            "lambda must be positive",
        )?;
        check(
            (1..=32).contains(&self.max_step_len),
            "max_step_len must be in 1..=32",
        )?;
        check(self.max_iters >= 1, "max_iters must be at least 1")?;
        check(
            self.tol >= 0.0 && self.tol.is_finite(),
            "tol must be a non-negative number",
        )?;
        check(
            self.enumeration_budget >= 1,
            "enumeration_budget must be at least 1",
        )?;
        check(
            (1..=64).contains(&self.max_len),
            "max_len must be in 1..=64",
        )?;
        check(self.top_k >= 1, "top_k must be at least 1")?;
        Ok(())
    }

    /// Deterministic unless both the config and the environment allow otherwise.
    pub fn deterministic_mode(&self) -> bool {
        self.deterministic && env_deterministic()
    }

    pub fn spatial(&self) -> SpatialConfig {
        SpatialConfig {
            nonterminals: self.nonterminals,
            seed: self.spatial_seed,
            lambda: self.lambda,
            max_len: self.max_step_len,
            max_iters: self.max_iters,
            tol: self.tol,
            parallel: !self.deterministic_mode(),
        }
    }

    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig {
            nonterminals: self.temporal_nonterminals,
            seed: self.temporal_seed,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

fn env_deterministic() -> bool {
    match std::env::var(DETERMINISTIC_ENV) {
        Ok(v) => !matches!(
            v.trim().to_ascii_lowercase().as_str(),
            "0" | "false" | "off" | "no"
        ),
        Err(_) => true,
    }
}
