//! An interactive run: a scenario advanced step by step, with operator
//! actions applied as they arrive and logged at the clock time they took
//! effect. The log plus the scenario replays the session exactly.

use crate::error::Result;
use crate::scenario::Scenario;
use crate::telemetry::{to_csv_string, TelemetryFrame};
use crate::transient::{Action, Event, PlantState, Simulation};

#[derive(Debug, Clone)]
pub struct Session {
    scenario: Scenario,
    sim: Simulation,
    log: Vec<Event>,
    frames: Vec<TelemetryFrame>,
}

impl Session {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let (sim, first) = scenario.start()?;
        Ok(Self {
            scenario,
            sim,
            log: Vec::new(),
            frames: vec![first],
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn state(&self) -> &PlantState {
        self.sim.state()
    }

    pub fn clock(&self) -> f64 {
        self.sim.clock()
    }

    /// Operator actions taken so far, stamped with the clock time they applied at.
    pub fn log(&self) -> &[Event] {
        &self.log
    }

    /// Every sampled frame since the start.
    pub fn frames(&self) -> &[TelemetryFrame] {
        &self.frames
    }

    pub fn snapshot(&self) -> TelemetryFrame {
        self.sim.snapshot()
    }

    /// Applies an action at the current clock time and returns the
    /// acknowledgement frame. A rejected action leaves the state untouched.
    pub fn act(&mut self, action: Action) -> Result<TelemetryFrame> {
        let frame = self.sim.act(&action)?;
        self.log.push(Event {
            time_s: self.sim.clock(),
            action,
        });
        Ok(frame)
    }

    /// Integrates one step; returns the frame if one was sampled.
    pub fn advance(&mut self) -> Result<Option<TelemetryFrame>> {
        let frame = self.sim.advance()?;
        if let Some(f) = &frame {
            self.frames.push(f.clone());
        }
        Ok(frame)
    }

    /// Integrates `steps` steps and returns the frames sampled on the way.
    pub fn advance_steps(&mut self, steps: u64) -> Result<Vec<TelemetryFrame>> {
        let mut out = Vec::new();
        for _ in 0..steps {
            out.extend(self.advance()?);
        }
        Ok(out)
    }

    /// The scenario with the logged actions added as events and the duration
    /// cut at the current clock. Running it reproduces this session's frames.
    pub fn replay_scenario(&self) -> Scenario {
        let mut s = self.scenario.clone();
        s.events.extend(self.log.iter().cloned());
        s.outputs.duration_s = self.clock();
        s
    }

    pub fn csv(&self) -> String {
        to_csv_string(&self.frames)
    }
}
