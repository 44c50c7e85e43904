//! Closed-loop topology, flow distribution and junction mixing.
//!
//! The loop is a directed cycle through exactly one fan. Between the fan
//! outlet and the fan inlet it may split into parallel groups whose branches
//! are simple chains that rejoin at a single merge node; groups do not nest.
//! Every element has a quadratic pressure drop `Δp = R·V̇²`, so the flow
//! problem reduces to series/parallel combination of those coefficients.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::components::{check_opening, fan_head, Component};
use crate::error::{Error, Result};
use crate::gasprops::GasState;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub id: String,
    pub from: String,
    pub to: String,
    pub component: Component,
}

impl Edge {
    pub fn new(id: impl Into<String>, from: impl Into<String>, to: impl Into<String>, component: Component) -> Self {
        Self {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            component,
        }
    }
}

/// A chain of edges inside a parallel group.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub edges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelGroup {
    pub split: String,
    pub merge: String,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Series(usize),
    Parallel(ParallelGroup),
}

/// A heat sink together with the valves that isolate it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPath {
    pub id: String,
    pub sink: usize,
    pub supply_valve: usize,
    pub return_valve: usize,
    /// Edges strictly between the two valves; they form a closed volume when
    /// both valves are shut.
    pub enclosed: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Supply,
    Return,
}

/// Plant graph plus the circulation plan derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    stages: Vec<Stage>,
    experiments: Vec<ExperimentPath>,
}

impl NetworkTopology {
    pub fn new(edges: Vec<Edge>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Topology(format!("duplicate edge id `{}`", e.id)));
            }
            if e.from == e.to {
                return Err(Error::Topology(format!(
                    "edge `{}` connects node `{}` to itself",
                    e.id, e.from
                )));
            }
            validate_component(&e.id, &e.component)?;
        }
        let stages = plan_loop(&edges)?;
        let experiments = find_experiments(&edges, &stages)?;
        Ok(Self {
            edges,
            index,
            stages,
            experiments,
        })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> &Edge {
        &self.edges[index]
    }

    pub fn edge_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("edge `{id}`")))
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Heat sinks in declaration order; experiment `n` (1-based) is entry `n-1`.
    pub fn experiments(&self) -> &[ExperimentPath] {
        &self.experiments
    }

    pub fn experiment(&self, id: &str) -> Result<&ExperimentPath> {
        self.experiments
            .iter()
            .find(|x| x.id == id)
            .ok_or_else(|| Error::NotFound(format!("experiment branch `{id}`")))
    }

    pub fn fan(&self) -> usize {
        match self.stages[0] {
            Stage::Series(i) => i,
            Stage::Parallel(_) => unreachable!("the plan always starts at the fan"),
        }
    }

    /// Edges in flow order starting at the fan, groups listed branch by branch.
    pub fn ordered_edges(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.edges.len());
        for stage in &self.stages {
            match stage {
                Stage::Series(i) => out.push(*i),
                Stage::Parallel(g) => g.branches.iter().for_each(|b| out.extend(&b.edges)),
            }
        }
        out
    }

    pub fn valve_opening(&self, branch: &str, side: Side) -> Result<f64> {
        let x = self.experiment(branch)?;
        let idx = match side {
            Side::Supply => x.supply_valve,
            Side::Return => x.return_valve,
        };
        match &self.edges[idx].component {
            Component::Valve(v) => Ok(v.opening),
            _ => unreachable!("experiment valves are checked when the plan is built"),
        }
    }

    pub fn set_valve_mut(&mut self, branch: &str, side: Side, opening: f64) -> Result<()> {
        check_opening(opening)?;
        let x = self.experiment(branch)?;
        let idx = match side {
            Side::Supply => x.supply_valve,
            Side::Return => x.return_valve,
        };
        match &mut self.edges[idx].component {
            Component::Valve(v) => v.opening = opening,
            _ => unreachable!("experiment valves are checked when the plan is built"),
        }
        Ok(())
    }

    /// True when both valves of the experiment are shut.
    pub fn is_isolated(&self, experiment: &ExperimentPath) -> bool {
        let closed = |i: usize| matches!(&self.edges[i].component, Component::Valve(v) if v.is_closed());
        closed(experiment.supply_valve) && closed(experiment.return_valve)
    }

    pub fn map_components(&mut self, mut f: impl FnMut(&str, &mut Component)) {
        for e in &mut self.edges {
            f(&e.id, &mut e.component);
        }
    }
}

/// Returns a copy of `topology` with one experiment valve moved.
pub fn set_valve(topology: &NetworkTopology, branch: &str, side: Side, opening: f64) -> Result<NetworkTopology> {
    let mut t = topology.clone();
    t.set_valve_mut(branch, side, opening)?;
    Ok(t)
}

fn validate_component(id: &str, component: &Component) -> Result<()> {
    let r = match component {
        Component::Fan(f) => f.validate(),
        Component::Cooler(c) => {
            if c.flow_resistance >= 0.0 && c.thermal_capacity >= 0.0 && c.internal_volume >= 0.0 {
                Ok(())
            } else {
                Err(Error::domain("cooler parameters must be non-negative"))
            }
        }
        Component::Line(l) => l.validate(),
        Component::Valve(v) => check_opening(v.opening).and_then(|_| {
            if v.full_open_resistance > 0.0 {
                Ok(())
            } else {
                Err(Error::domain("valve full-open resistance must be positive"))
            }
        }),
        Component::HeatSink(h) => h.validate(),
    };
    r.map_err(|e| match e {
        Error::Domain(msg) => Error::Domain(format!("edge `{id}`: {msg}")),
        other => other,
    })
}

fn plan_loop(edges: &[Edge]) -> Result<Vec<Stage>> {
    let fans: Vec<usize> = (0..edges.len())
        .filter(|&i| matches!(edges[i].component, Component::Fan(_)))
        .collect();
    let fan = match fans.as_slice() {
        [f] => *f,
        [] => return Err(Error::Topology("the loop has no fan".into())),
        _ => return Err(Error::Topology("the loop has more than one fan".into())),
    };

    let mut outgoing: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut incoming: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        outgoing.entry(e.from.as_str()).or_default().push(i);
        incoming.entry(e.to.as_str()).or_default().push(i);
    }
    let in_degree = |n: &str| incoming.get(n).map_or(0, Vec::len);
    let outs = |n: &str| outgoing.get(n).cloned().unwrap_or_default();

    let start = edges[fan].from.as_str();
    if in_degree(start) != 1 {
        return Err(Error::Topology(format!(
            "fan inlet node `{start}` must have exactly one feed"
        )));
    }
    let mut stages = vec![Stage::Series(fan)];
    let mut visited = vec![false; edges.len()];
    visited[fan] = true;
    let mut node = edges[fan].to.as_str();

    while node != start {
        let out = outs(node);
        match out.len() {
            0 => return Err(Error::Topology(format!("node `{node}` is a dead end"))),
            1 => {
                let e = out[0];
                if visited[e] {
                    return Err(Error::Topology(format!("edge `{}` is visited twice", edges[e].id)));
                }
                visited[e] = true;
                let next = edges[e].to.as_str();
                if in_degree(next) != 1 {
                    return Err(Error::Topology(format!(
                        "node `{next}` merges flow that was never split"
                    )));
                }
                stages.push(Stage::Series(e));
                node = next;
            }
            _ => {
                let mut branches = Vec::with_capacity(out.len());
                let mut merge: Option<&str> = None;
                for &first in &out {
                    let mut chain = Vec::new();
                    let mut e = first;
                    loop {
                        if visited[e] {
                            return Err(Error::Topology(format!("edge `{}` is visited twice", edges[e].id)));
                        }
                        visited[e] = true;
                        chain.push(e);
                        let next = edges[e].to.as_str();
                        if in_degree(next) > 1 {
                            match merge {
                                None => merge = Some(next),
                                Some(m) if m != next => {
                                    return Err(Error::Topology(format!(
                                        "branches split at `{node}` rejoin at different nodes (`{m}`, `{next}`)"
                                    )))
                                }
                                _ => {}
                            }
                            break;
                        }
                        let next_out = outs(next);
                        if next_out.len() != 1 {
                            return Err(Error::Topology(format!(
                                "node `{next}` inside a parallel branch must have one inlet and one outlet"
                            )));
                        }
                        e = next_out[0];
                    }
                    branches.push(Branch {
                        id: branch_id(edges, &chain),
                        edges: chain,
                    });
                }
                let merge = merge.expect("at least one branch");
                if in_degree(merge) != branches.len() {
                    return Err(Error::Topology(format!(
                        "merge node `{merge}` has inlets from outside the group split at `{node}`"
                    )));
                }
                stages.push(Stage::Parallel(ParallelGroup {
                    split: node.to_string(),
                    merge: merge.to_string(),
                    branches,
                }));
                node = merge;
            }
        }
    }

    if let Some(i) = visited.iter().position(|v| !v) {
        return Err(Error::Topology(format!(
            "edge `{}` is not on the circulation loop",
            edges[i].id
        )));
    }
    let mut ids: Vec<&str> = Vec::new();
    for stage in &stages {
        if let Stage::Parallel(g) = stage {
            for b in &g.branches {
                if ids.contains(&b.id.as_str()) {
                    return Err(Error::Topology(format!("branch id `{}` is ambiguous", b.id)));
                }
                ids.push(&b.id);
            }
        }
    }
    Ok(stages)
}

fn branch_id(edges: &[Edge], chain: &[usize]) -> String {
    let pick = |pred: fn(&Component) -> bool| chain.iter().find(|&&i| pred(&edges[i].component));
    pick(|c| matches!(c, Component::HeatSink(_)))
        .or_else(|| pick(|c| matches!(c, Component::Cooler(_))))
        .map_or_else(|| edges[chain[0]].id.clone(), |&i| edges[i].id.clone())
}

/// Chains of edges between junctions (or the fan); each heat sink lives in one.
fn chains(edges: &[Edge], stages: &[Stage]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut run = Vec::new();
    for stage in stages {
        match stage {
            Stage::Series(i) if matches!(edges[*i].component, Component::Fan(_)) => {}
            Stage::Series(i) => run.push(*i),
            Stage::Parallel(g) => {
                out.push(std::mem::take(&mut run));
                out.extend(g.branches.iter().map(|b| b.edges.clone()));
            }
        }
    }
    out.push(run);
    out
}

fn find_experiments(edges: &[Edge], stages: &[Stage]) -> Result<Vec<ExperimentPath>> {
    let mut found = Vec::new();
    for chain in chains(edges, stages) {
        let sinks: Vec<usize> = chain
            .iter()
            .copied()
            .filter(|&i| matches!(edges[i].component, Component::HeatSink(_)))
            .collect();
        if sinks.len() > 1 {
            return Err(Error::Topology(format!(
                "heat sinks `{}` and `{}` share one branch",
                edges[sinks[0]].id, edges[sinks[1]].id
            )));
        }
        let Some(&sink) = sinks.first() else { continue };
        let pos = chain.iter().position(|&i| i == sink).unwrap();
        let is_valve = |i: &&usize| matches!(edges[**i].component, Component::Valve(_));
        let before: Vec<&usize> = chain[..pos].iter().filter(is_valve).collect();
        let after: Vec<&usize> = chain[pos + 1..].iter().filter(is_valve).collect();
        if before.len() != 1 || after.len() != 1 {
            return Err(Error::Topology(format!(
                "heat sink `{}` needs exactly one supply valve and one return valve",
                edges[sink].id
            )));
        }
        let (supply, ret) = (*before[0], *after[0]);
        let a = chain.iter().position(|&i| i == supply).unwrap();
        let b = chain.iter().position(|&i| i == ret).unwrap();
        found.push(ExperimentPath {
            id: edges[sink].id.clone(),
            sink,
            supply_valve: supply,
            return_valve: ret,
            enclosed: chain[a + 1..b].to_vec(),
        });
    }
    found.sort_by_key(|x| x.sink);
    Ok(found)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FanOperatingPoint {
    pub rpm: f64,
    pub rpm_clamped: bool,
    pub volume_flow: f64,
    pub head: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSolution {
    /// Per edge, indexed like `NetworkTopology::edges`, m³/s.
    pub volume_flow: Vec<f64>,
    /// Per edge, kg/s.
    pub mass_flow: Vec<f64>,
    /// Pressure drop across each parallel branch, Pa.
    pub branch_pressure_drop: BTreeMap<String, f64>,
    pub fan: FanOperatingPoint,
    /// Uniform density used for the solve, kg/m³.
    pub density: f64,
    /// Largest pressure-drop mismatch inside any parallel group, Pa.
    pub max_group_residual: f64,
}

impl FlowSolution {
    pub fn total_volume_flow(&self) -> f64 {
        self.fan.volume_flow
    }

    pub fn total_mass_flow(&self) -> f64 {
        self.fan.volume_flow * self.density
    }

    pub fn is_stagnant(&self) -> bool {
        self.fan.volume_flow == 0.0
    }

    /// Same flows carried by gas of a different density.
    pub fn with_density(&self, density: f64) -> Self {
        let mut s = self.clone();
        s.density = density;
        s.mass_flow = s.volume_flow.iter().map(|v| v * density).collect();
        s
    }

    fn stagnant(n: usize, rpm: f64, density: f64) -> Self {
        Self {
            volume_flow: vec![0.0; n],
            mass_flow: vec![0.0; n],
            branch_pressure_drop: BTreeMap::new(),
            fan: FanOperatingPoint {
                rpm,
                rpm_clamped: false,
                volume_flow: 0.0,
                head: 0.0,
            },
            density,
            max_group_residual: 0.0,
        }
    }
}

/// Flow resistance of a chain, `None` if any element in it is shut.
fn chain_resistance(topology: &NetworkTopology, chain: &[usize]) -> Option<f64> {
    chain
        .iter()
        .map(|&i| topology.edges[i].component.flow_resistance())
        .sum()
}

/// Operating point of the fan against the loop and the resulting split.
///
/// Density is taken uniform at `gas`. A non-positive `rpm` means the fan is
/// off and yields a stagnant solution.
pub fn solve_flow(topology: &NetworkTopology, rpm: f64, gas: &GasState) -> Result<FlowSolution> {
    let n = topology.edges.len();
    if rpm <= 0.0 {
        return Ok(FlowSolution::stagnant(n, 0.0, gas.density));
    }
    let Component::Fan(fan) = &topology.edges[topology.fan()].component else {
        unreachable!()
    };

    // Total quadratic coefficient of the loop, and per group the branch
    // conductances (R^-1/2) needed to split the flow afterwards.
    let mut total_r = 0.0;
    let mut splits: Vec<(&ParallelGroup, Vec<Option<f64>>)> = Vec::new();
    for stage in &topology.stages {
        match stage {
            Stage::Series(i) => {
                total_r += topology.edges[*i]
                    .component
                    .flow_resistance()
                    .ok_or_else(|| Error::CircuitBlocked(topology.edges[*i].id.clone()))?;
            }
            Stage::Parallel(g) => {
                let rs: Vec<Option<f64>> = g
                    .branches
                    .iter()
                    .map(|b| chain_resistance(topology, &b.edges))
                    .collect();
                let open: Vec<f64> = rs.iter().flatten().copied().collect();
                if open.is_empty() {
                    return Err(Error::CircuitBlocked(g.split.clone()));
                }
                if open.iter().all(|&r| r > 0.0) {
                    let c: f64 = open.iter().map(|r| r.sqrt().recip()).sum();
                    total_r += 1.0 / (c * c);
                }
                splits.push((g, rs));
            }
        }
    }

    let (rpm_used, rpm_clamped) = fan.clamp_rpm(rpm);
    let speed = rpm_used / fan.reference_rpm;
    let shutoff = fan.shutoff_head() * speed * speed;
    let total = (shutoff / (fan.internal_coefficient() + total_r)).sqrt();
    let head = fan_head(fan, rpm_used, total).head;

    let mut volume_flow = vec![0.0; n];
    let mut branch_pressure_drop = BTreeMap::new();
    let mut max_group_residual: f64 = 0.0;
    for stage in &topology.stages {
        if let Stage::Series(i) = stage {
            volume_flow[*i] = total;
        }
    }
    for (group, rs) in splits {
        let zero_r = rs.iter().filter(|r| **r == Some(0.0)).count();
        let weight = |r: Option<f64>| match r {
            None => 0.0,
            Some(r) if zero_r > 0 => {
                if r == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Some(r) => r.sqrt().recip(),
        };
        let weights: Vec<f64> = rs.iter().map(|&r| weight(r)).collect();
        let sum: f64 = weights.iter().sum();
        let mut drops = Vec::new();
        for ((branch, w), r) in group.branches.iter().zip(&weights).zip(&rs) {
            let q = total * w / sum;
            for &i in &branch.edges {
                volume_flow[i] = q;
            }
            let dp = r.map_or(0.0, |r| r * q * q);
            if r.is_some() {
                drops.push(dp);
            }
            branch_pressure_drop.insert(branch.id.clone(), dp);
        }
        let lo = drops.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max_group_residual = max_group_residual.max(hi - lo);
    }

    let mass_flow = volume_flow.iter().map(|v| v * gas.density).collect();
    Ok(FlowSolution {
        volume_flow,
        mass_flow,
        branch_pressure_drop,
        fan: FanOperatingPoint {
            rpm: rpm_used,
            rpm_clamped,
            volume_flow: total,
            head,
        },
        density: gas.density,
        max_group_residual,
    })
}

/// Adiabatic mixing of streams with a common specific heat.
pub fn mix_streams(streams: &[(f64, f64)]) -> Result<f64> {
    let mut mass = 0.0;
    let mut enthalpy = 0.0;
    for &(m, t) in streams {
        if !(m >= 0.0) {
            return Err(Error::domain(format!("mass flow must be non-negative, got {m}")));
        }
        if !(t > 0.0) {
            return Err(Error::domain(format!("temperature must be positive, got {t}")));
        }
        mass += m;
        enthalpy += m * t;
    }
    if mass == 0.0 {
        return Err(Error::UndefinedMix);
    }
    Ok(enthalpy / mass)
}
