use std::fs;
use std::path::Path;

use anyhow::Context;
use grasp::evalkit::EvalOptions;
use grasp::model::GraspConfig;
use grasp::synthdata::SceneConfig;
use grasp::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeOptions {
    pub lambda: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { lambda: 1.0 }
    }
}

/// Everything a subcommand reads, after merging the JSON file and flags.
/// `seed` drives every stage; it overwrites the per-stage seeds on resolve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub model: GraspConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub probe: ProbeOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| grasp::GraspError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| grasp::GraspError::Config(format!("{}: {e}", path.display())))
            .context("reading run configuration")
    }

    pub fn set_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
    }

    /// Provenance record embedded in every artifact.
    pub fn provenance(&self, command: &str) -> Value {
        json!({
            "version": grasp::VERSION,
            "command": command,
            "config": self,
        })
    }

    /// Single-line form for `#` comments in CSV and PGM outputs.
    pub fn comment(&self, command: &str) -> String {
        format!(
            "{}\nconfig {}",
            grasp::VERSION,
            serde_json::to_string(&self.provenance(command)).expect("json")
        )
    }
}
