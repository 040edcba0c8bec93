//! Modeled completion times of a plan.
//!
//! Each device works through the layers in topological order. A device starts
//! its share of a layer once it has finished its previous layer and every
//! message carrying operators it lacks has arrived. Messages leave as soon as
//! the sending device has finished the source layer and queue FIFO on their
//! direction's half-link.

use std::collections::HashMap;
use std::ops::Range;

use crate::cost::{compute_time, energy_per_inference, HalfLink, PowerStates, Role, Timeline};
use crate::error::{Error, Result};
use crate::model::Source;
use crate::opset::RangeSet;

use super::{Direction, Problem, SchedulePlan};

#[derive(Clone, Debug, PartialEq)]
pub struct SentMessage {
    pub source: Source,
    pub direction: Direction,
    pub ops: Range<usize>,
    pub payload: u64,
    pub enqueued: f64,
    pub start: f64,
    pub serialized: f64,
    pub delivered: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub t_robot: Vec<f64>,
    pub t_server: Vec<f64>,
    /// Robot holds the complete final output.
    pub objective: f64,
    pub robot_compute: Vec<(f64, f64)>,
    pub server_compute: Vec<(f64, f64)>,
    pub messages: Vec<SentMessage>,
}

impl Evaluation {
    pub fn timeline(&self) -> Timeline {
        let busy: Vec<(f64, f64)> = self
            .messages
            .iter()
            .map(|m| (m.start, m.serialized))
            .collect();
        Timeline::from_intervals(self.objective, &self.robot_compute, &busy)
    }

    pub fn energy(&self, power: &PowerStates) -> Result<f64> {
        energy_per_inference(&self.timeline(), power)
    }

    pub fn compute_total(&self) -> f64 {
        self.robot_compute
            .iter()
            .chain(&self.server_compute)
            .map(|(a, b)| b - a)
            .sum()
    }

    pub fn transmit_total(&self) -> f64 {
        self.messages.iter().map(|m| m.delivered - m.start).sum()
    }
}

pub fn evaluate_plan(problem: &Problem, plan: &SchedulePlan) -> Result<Evaluation> {
    let g = problem.graph;
    let link = problem.profile.link;
    let bw = problem.bandwidth_bps;
    for (i, lp) in plan.layers.iter().enumerate() {
        if lp.robot.union(&lp.server) != RangeSet::full(g.layer(i).operator_count) {
            return Err(Error::Coverage {
                layer: i,
                msg: format!("robot {} server {}", lp.robot, lp.server),
            });
        }
    }
    let mut links = [HalfLink::default(), HalfLink::default()];
    let mut arrivals: HashMap<(Source, Direction), Vec<(Range<usize>, f64)>> = HashMap::new();
    let mut messages = Vec::new();
    let mut send = |src: Source, dir: Direction, now: f64, arrivals: &mut HashMap<_, Vec<_>>| {
        for ops in plan.outgoing(g, src, dir) {
            let payload = g.ops_bytes(src, &RangeSet::from_range(ops.clone()));
            let half = &mut links[dir as usize];
            let s = half.send(payload, now, bw, &link);
            arrivals
                .entry((src, dir))
                .or_insert_with(Vec::new)
                .push((ops.clone(), s.delivered));
            messages.push(SentMessage {
                source: src,
                direction: dir,
                ops,
                payload,
                enqueued: now,
                start: s.start,
                serialized: s.serialized,
                delivered: s.delivered,
            });
        }
    };
    let arrival = |arrivals: &HashMap<(Source, Direction), Vec<(Range<usize>, f64)>>,
                   src: Source,
                   dir: Direction,
                   need: &RangeSet|
     -> Result<f64> {
        let mut t = f64::NEG_INFINITY;
        let mut got = RangeSet::new();
        for (r, at) in arrivals
            .get(&(src, dir))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
        {
            let rs = RangeSet::from_range(r.clone());
            if rs.intersects(need) {
                t = t.max(*at);
                got.union_with(&rs);
            }
        }
        if !need.is_subset(&got) {
            return Err(Error::Invariant(format!(
                "no message carries {} of {} {:?}",
                need, src, dir
            )));
        }
        Ok(t)
    };

    send(Source::Input, Direction::ToServer, 0.0, &mut arrivals);
    let n = g.len();
    let (mut t_robot, mut t_server) = (vec![0.0; n], vec![0.0; n]);
    let (mut robot_compute, mut server_compute) = (Vec::new(), Vec::new());
    let (mut prev_r, mut prev_s) = (0.0f64, 0.0f64);
    for (i, lp) in plan.layers.iter().enumerate() {
        if !lp.robot.is_empty() {
            let mut ready = prev_r;
            for e in lp.edges.iter().filter(|e| !e.to_robot.is_empty()) {
                ready = ready.max(arrival(
                    &arrivals,
                    e.source,
                    Direction::ToRobot,
                    &e.to_robot,
                )?);
            }
            let c = compute_time(problem.profile, i, &lp.robot, Role::Robot);
            robot_compute.push((ready, ready + c));
            prev_r = ready + c;
        }
        if !lp.server.is_empty() {
            let mut ready = prev_s;
            for e in lp.edges.iter().filter(|e| !e.to_server.is_empty()) {
                ready = ready.max(arrival(
                    &arrivals,
                    e.source,
                    Direction::ToServer,
                    &e.to_server,
                )?);
            }
            let c = compute_time(problem.profile, i, &lp.server, Role::Server);
            server_compute.push((ready, ready + c));
            prev_s = ready + c;
        }
        t_robot[i] = prev_r;
        t_server[i] = prev_s;
        send(Source::Layer(i), Direction::ToServer, prev_r, &mut arrivals);
        send(Source::Layer(i), Direction::ToRobot, prev_s, &mut arrivals);
    }
    let last = n - 1;
    let mut objective = t_robot[last];
    if !plan.terminal.is_empty() {
        objective = objective.max(arrival(
            &arrivals,
            Source::Layer(last),
            Direction::ToRobot,
            &plan.terminal,
        )?);
    }
    Ok(Evaluation {
        t_robot,
        t_server,
        objective,
        robot_compute,
        server_compute,
        messages,
    })
}
