//! Run artifacts on disk: atomic writes, action logs and persisted runs.

use std::io::Write;
use std::path::{Path, PathBuf};

use cryoloop::scenario::{Scenario, ScenarioError};
use cryoloop::session::Session;
use cryoloop::transient::Event;
use serde::{Deserialize, Serialize};

/// Writes `contents` to a temporary file next to `path`, then renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Operator actions taken during a session, with the clock time the session
/// had reached. Appended to the session's scenario it replays the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionLog {
    pub clock_s: f64,
    #[serde(default)]
    pub events: Vec<Event>,
}

impl ActionLog {
    pub fn of(session: &Session) -> Self {
        Self {
            clock_s: session.clock(),
            events: session.log().to_vec(),
        }
    }

    pub fn parse(src: &str) -> Result<Self, ScenarioError> {
        toml::from_str(src).map_err(|e| ScenarioError::from_toml(src, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("action logs serialize to TOML")
    }

    /// `scenario` with these actions added and its duration set to the log's clock.
    pub fn apply_to(&self, scenario: &mut Scenario) {
        scenario.events.extend(self.events.iter().cloned());
        scenario.outputs.duration_s = self.clock_s;
    }
}

/// File names of a persisted run.
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const ACTIONS_FILE: &str = "actions.toml";
pub const TELEMETRY_FILE: &str = "telemetry.csv";

/// Stores the scenario, action log and telemetry of a session under `runs_dir/id`.
pub fn persist_run(runs_dir: &Path, id: &str, session: &Session) -> std::io::Result<PathBuf> {
    let dir = runs_dir.join(id);
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(SCENARIO_FILE), session.scenario().to_toml().as_bytes())?;
    write_atomic(&dir.join(ACTIONS_FILE), ActionLog::of(session).to_toml().as_bytes())?;
    write_atomic(&dir.join(TELEMETRY_FILE), session.csv().as_bytes())?;
    Ok(dir)
}
