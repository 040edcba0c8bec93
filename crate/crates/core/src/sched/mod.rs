//! Schedule plans: which operators of each layer run on the robot and on the
//! server, what crosses the link, and the modeled completion times.
//!
//! A plan is encoded as one split point per layer. The robot nominally takes
//! operators `[0, s)` and the server `[s, n)`. Layers whose output is larger
//! than the raw input (the set Π) may not receive operator outputs over the
//! link, so decoding widens their parents' operator sets until each side can
//! produce what it needs locally. This is where redundant computation comes
//! from, and it makes every genome a feasible plan.

mod eval;
mod planbook;
mod search;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cost::{CostProfile, PiSet, PowerStates};
use crate::error::{Error, Result};
use crate::lop::{self, EdgeTransfer};
use crate::model::{ModelGraph, Source};
use crate::opset::RangeSet;

pub use eval::{evaluate_plan, Evaluation, SentMessage};
pub use planbook::{build_planbook, Bucket, PlanBook, PLANBOOK_FORMAT, PLANBOOK_VERSION};
pub use search::{solve_de, solve_exhaustive, EXHAUSTIVE_LIMIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToServer,
    ToRobot,
}

/// Differential evolution settings (rand/1/bin).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover: f64,
    pub weight: f64,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            population: 30,
            generations: 200,
            crossover: 0.9,
            weight: 0.8,
            seed: 0,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::Invalid(format!(
                "population must be >= 4, got {}",
                self.population
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::Invalid(format!(
                "crossover rate must be in [0, 1], got {}",
                self.crossover
            )));
        }
        if !(self.weight > 0.0 && self.weight <= 2.0) {
            return Err(Error::Invalid(format!(
                "differential weight must be in (0, 2], got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// One scheduling instance: a model, its cost profile and a link bandwidth.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    pub graph: &'a ModelGraph,
    pub profile: &'a CostProfile,
    pub bandwidth_bps: f64,
    pub pi: PiSet,
    pub power: PowerStates,
}

impl<'a> Problem<'a> {
    pub fn new(
        graph: &'a ModelGraph,
        profile: &'a CostProfile,
        bandwidth_bps: f64,
    ) -> Result<Self> {
        if !(bandwidth_bps > 0.0) {
            return Err(Error::Invalid(format!(
                "bandwidth must be > 0 bps, got {}",
                bandwidth_bps
            )));
        }
        if profile.layers.len() != graph.len() {
            return Err(Error::Invalid(format!(
                "profile has {} layers, model has {}",
                profile.layers.len(),
                graph.len()
            )));
        }
        Ok(Problem {
            graph,
            profile,
            bandwidth_bps,
            pi: crate::cost::pi_set(graph, profile),
            power: PowerStates::default(),
        })
    }

    pub fn with_power(mut self, power: PowerStates) -> Self {
        self.power = power;
        self
    }

    /// Inclusive range of each gene. A final layer in Π is pinned to the robot.
    pub fn gene_bounds(&self) -> Vec<(usize, usize)> {
        let last = self.graph.final_layer();
        self.graph
            .layers()
            .iter()
            .map(|l| {
                let n = l.operator_count;
                if l.id == last && self.pi.contains(last) {
                    (n, n)
                } else {
                    (0, n)
                }
            })
            .collect()
    }

    pub fn all_local(&self) -> Vec<usize> {
        self.graph
            .layers()
            .iter()
            .map(|l| l.operator_count)
            .collect()
    }

    pub fn all_server(&self) -> Vec<usize> {
        self.clamp(&vec![0; self.graph.len()])
    }

    /// Pipeline cut: layers before `k` on the robot, the rest on the server.
    pub fn pp_cut(&self, k: usize) -> Vec<usize> {
        let g: Vec<usize> = self
            .graph
            .layers()
            .iter()
            .map(|l| if l.id < k { l.operator_count } else { 0 })
            .collect();
        self.clamp(&g)
    }

    pub fn clamp(&self, genome: &[usize]) -> Vec<usize> {
        genome
            .iter()
            .zip(self.gene_bounds())
            .map(|(&g, (lo, hi))| g.clamp(lo, hi))
            .collect()
    }

    /// Robot and server operator sets of every layer for a genome.
    pub fn decode(&self, genome: &[usize]) -> (Vec<RangeSet>, Vec<RangeSet>) {
        let g = self.graph;
        let genome = self.clamp(genome);
        let mut x: Vec<RangeSet> = Vec::with_capacity(g.len());
        let mut y: Vec<RangeSet> = Vec::with_capacity(g.len());
        for (l, &s) in g.layers().iter().zip(&genome) {
            x.push(RangeSet::from_range(0..s));
            y.push(RangeSet::from_range(s..l.operator_count));
        }
        for i in (0..g.len()).rev() {
            if !self.pi.contains(i) {
                continue;
            }
            let need_r = lop::parent_ops(g, i, &x[i]);
            let need_s = lop::parent_ops(g, i, &y[i]);
            for ((src, nr), (_, ns)) in need_r.into_iter().zip(need_s) {
                if let Source::Layer(p) = src {
                    x[p].union_with(&nr);
                    y[p].union_with(&ns);
                }
            }
        }
        (x, y)
    }

    /// Decoded, evaluated plan for a genome.
    pub fn plan(&self, genome: &[usize]) -> Result<SchedulePlan> {
        let genome = self.clamp(genome);
        let (x, y) = self.decode(&genome);
        let mut plan = SchedulePlan::from_sets(self.graph, self.bandwidth_bps, x, y)?;
        plan.genome = genome;
        self.finish(&mut plan)?;
        Ok(plan)
    }

    /// Fills in modeled times and energy.
    pub fn finish(&self, plan: &mut SchedulePlan) -> Result<Evaluation> {
        let ev = evaluate_plan(self, plan)?;
        for (lp, (tr, ts)) in plan
            .layers
            .iter_mut()
            .zip(ev.t_robot.iter().zip(&ev.t_server))
        {
            lp.t_robot = *tr;
            lp.t_server = *ts;
        }
        plan.objective = ev.objective;
        plan.energy = ev.energy(&self.power)?;
        Ok(ev)
    }

    /// Best pipeline cut (including all-local and all-server) by modeled objective.
    pub fn best_pp(&self) -> Result<SchedulePlan> {
        let mut best: Option<SchedulePlan> = None;
        for k in (0..=self.graph.len()).rev() {
            let p = self.plan(&self.pp_cut(k))?;
            if best.as_ref().is_none_or(|b| better(&p, b)) {
                best = Some(p);
            }
        }
        Ok(best.expect("at least one cut"))
    }
}

/// Strict preference between two evaluated plans: lower objective, then more
/// robot-side operators, then the larger split at the first differing layer.
pub fn better(a: &SchedulePlan, b: &SchedulePlan) -> bool {
    if a.objective != b.objective {
        return a.objective < b.objective;
    }
    let (ra, rb) = (a.robot_ops(), b.robot_ops());
    if ra != rb {
        return ra > rb;
    }
    a.genome > b.genome
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanFlags {
    /// Found by exhaustive enumeration.
    pub exhaustive: bool,
    /// Constraints leave all-local as the only plan.
    pub forced_local: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub id: usize,
    /// `X_i`
    pub robot: RangeSet,
    /// `Y_i`
    pub server: RangeSet,
    /// Per parent: `M_i` (to robot) and `N_i` (to server). For the raw input
    /// only the server's share appears.
    pub edges: Vec<EdgeTransfer>,
    pub t_robot: f64,
    pub t_server: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub bandwidth_bps: f64,
    pub genome: Vec<usize>,
    pub layers: Vec<LayerPlan>,
    /// Final-layer operators the server sends back.
    pub terminal: RangeSet,
    pub objective: f64,
    pub energy: f64,
    pub flags: PlanFlags,
}

impl SchedulePlan {
    /// Derives transfer sets for given operator sets. Times are left at zero.
    pub fn from_sets(
        graph: &ModelGraph,
        bandwidth_bps: f64,
        x: Vec<RangeSet>,
        y: Vec<RangeSet>,
    ) -> Result<SchedulePlan> {
        if x.len() != graph.len() || y.len() != graph.len() {
            return Err(Error::Invalid(
                "one robot and one server set per layer required".into(),
            ));
        }
        let mut layers = Vec::with_capacity(graph.len());
        for i in 0..graph.len() {
            let edges = lop::transfer_sets(graph, i, &x, &y)?;
            layers.push(LayerPlan {
                id: i,
                robot: x[i].clone(),
                server: y[i].clone(),
                edges,
                t_robot: 0.0,
                t_server: 0.0,
            });
        }
        let last = graph.final_layer();
        let terminal = RangeSet::full(graph.layer(last).operator_count).difference(&x[last]);
        Ok(SchedulePlan {
            bandwidth_bps,
            genome: Vec::new(),
            layers,
            terminal,
            objective: 0.0,
            energy: 0.0,
            flags: PlanFlags::default(),
        })
    }

    pub fn robot_ops(&self) -> usize {
        self.layers.iter().map(|l| l.robot.len()).sum()
    }

    pub fn server_ops(&self) -> usize {
        self.layers.iter().map(|l| l.server.len()).sum()
    }

    pub fn is_all_local(&self) -> bool {
        self.layers.iter().all(|l| l.server.is_empty())
    }

    pub fn edge(&self, layer: usize, src: Source) -> Option<&EdgeTransfer> {
        self.layers[layer].edges.iter().find(|e| e.source == src)
    }

    /// Operators of `src` sent in direction `dir`, one message per contiguous
    /// run, ascending. A source's messages carry the union of what all its
    /// consumers need from the other side.
    pub fn outgoing(&self, graph: &ModelGraph, src: Source, dir: Direction) -> Vec<Range<usize>> {
        let mut set = RangeSet::new();
        for &c in graph.children(src) {
            if let Some(e) = self.edge(c, src) {
                set.union_with(match dir {
                    Direction::ToServer => &e.to_server,
                    Direction::ToRobot => &e.to_robot,
                });
            }
        }
        if dir == Direction::ToRobot && src == Source::Layer(graph.final_layer()) {
            set.union_with(&self.terminal);
        }
        set.ranges().collect()
    }

    /// Every message of the plan as (source, direction, operator range).
    pub fn messages(&self, graph: &ModelGraph) -> Vec<(Source, Direction, Range<usize>)> {
        let mut out = Vec::new();
        let sources = std::iter::once(Source::Input).chain((0..graph.len()).map(Source::Layer));
        for src in sources {
            for dir in [Direction::ToServer, Direction::ToRobot] {
                for r in self.outgoing(graph, src, dir) {
                    out.push((src, dir, r));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Checks every structural property of a plan: coverage, dependency closure
/// (the stored transfer sets are exactly what the operator sets imply), no
/// transfers into Π layers, and a robot-resident final result.
pub fn validate_plan(graph: &ModelGraph, pi: &PiSet, plan: &SchedulePlan) -> Result<()> {
    if plan.layers.len() != graph.len() {
        return Err(Error::Invariant(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            graph.len()
        )));
    }
    let x: Vec<RangeSet> = plan.layers.iter().map(|l| l.robot.clone()).collect();
    let y: Vec<RangeSet> = plan.layers.iter().map(|l| l.server.clone()).collect();
    for (i, lp) in plan.layers.iter().enumerate() {
        let n = graph.layer(i).operator_count;
        if lp.robot.end().unwrap_or(0) > n || lp.server.end().unwrap_or(0) > n {
            return Err(Error::Invariant(format!(
                "layer {}: operator index beyond {}",
                i, n
            )));
        }
        let expect = lop::transfer_sets(graph, i, &x, &y)?;
        if expect != lp.edges {
            return Err(Error::Invariant(format!(
                "layer {}: transfer sets {:?} differ from dependency closure {:?}",
                i, lp.edges, expect
            )));
        }
        if pi.contains(i) {
            for e in &lp.edges {
                if e.source != Source::Input && (!e.to_robot.is_empty() || !e.to_server.is_empty())
                {
                    return Err(Error::Invariant(format!(
                        "layer {} is in the oversized set but receives {} / {} from {}",
                        i, e.to_robot, e.to_server, e.source
                    )));
                }
            }
        }
    }
    let last = graph.final_layer();
    let missing = RangeSet::full(graph.layer(last).operator_count).difference(&x[last]);
    if missing != plan.terminal {
        return Err(Error::Invariant(format!(
            "terminal transfer {} does not complete the robot's result (missing {})",
            plan.terminal, missing
        )));
    }
    if pi.contains(last) && !plan.terminal.is_empty() {
        return Err(Error::Invariant(
            "final layer is oversized but its result crosses the link".into(),
        ));
    }
    Ok(())
}
