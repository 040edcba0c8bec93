//! Discrete-event replay of plans over a simulated link.
//!
//! Both endpoints run in one thread. Each endpoint works through its layers in
//! topological order; compute completions enqueue messages on the link and
//! deliveries wake the receiving endpoint. Compute durations come from the
//! cost profile, so replays are deterministic.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::ops::Range;

use crate::cost::{compute_time, CostProfile, Role};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Source};
use crate::netsim::{BandwidthTrace, EventLog, EwmaPredictor, SimLink};
use crate::opset::RangeSet;
use crate::sched::{Direction, Evaluation, PlanBook, Problem, SchedulePlan, SentMessage};
use crate::tensor::{Fragment, Tensor};

use super::{axis_runs, compute_rows, incoming, sending, share, FragmentStore};

enum Kind {
    ComputeDone {
        role: Role,
        layer: usize,
    },
    Deliver {
        msg: usize,
        fragment: Option<Fragment>,
    },
}

struct Event {
    t: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then(o.seq.cmp(&self.seq))
    }
}

struct Endpoint {
    role: Role,
    next: usize,
    busy: bool,
    prev: f64,
    done: Vec<f64>,
    arrived: HashMap<Source, RangeSet>,
    store: FragmentStore,
    compute: Vec<(f64, f64)>,
}

impl Endpoint {
    fn new(role: Role, n: usize, start: f64) -> Self {
        Endpoint {
            role,
            next: 0,
            busy: false,
            prev: start,
            done: vec![start; n],
            arrived: HashMap::new(),
            store: FragmentStore::new(),
            compute: Vec::new(),
        }
    }
}

/// One replayed inference. Times in `eval` are relative to `start`.
#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub eval: Evaluation,
    pub start: f64,
    /// Absolute time the last event of the inference happened on either side.
    pub end: f64,
    /// Final output on the robot, when replaying with tensors.
    pub output: Option<Tensor>,
}

impl SimOutcome {
    pub fn wall(&self) -> f64 {
        self.eval.objective
    }
}

struct Sim<'a> {
    graph: &'a ModelGraph,
    profile: &'a CostProfile,
    plan: &'a SchedulePlan,
    link: &'a mut SimLink,
    log: &'a mut EventLog,
    id: u32,
    tensors: bool,
    queue: BinaryHeap<Event>,
    seq: u64,
    messages: Vec<SentMessage>,
    terminal_at: f64,
}

impl Sim<'_> {
    fn push(&mut self, t: f64, kind: Kind) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::TraceExhausted(format!(
                "inference {}: link never delivers (trace ends in an outage)",
                self.id
            )));
        }
        self.seq += 1;
        self.queue.push(Event {
            t,
            seq: self.seq,
            kind,
        });
        Ok(())
    }

    fn send(&mut self, ep: &Endpoint, src: Source, now: f64) -> Result<()> {
        let dir = sending(ep.role);
        for ops in self.plan.outgoing(self.graph, src, dir) {
            let set = RangeSet::from_range(ops.clone());
            let payload = self.graph.ops_bytes(src, &set);
            let fragment = if self.tensors {
                let rows = self.graph.ops_to_axis(src, &set).hull().expect("non-empty");
                Some(ep.store.assemble(self.graph, src, rows)?)
            } else {
                None
            };
            let x = self.link.transfer(dir, payload, now);
            self.log.record(
                now,
                "send",
                format_args!(
                    "inf={} src={} dir={} ops={}..{} bytes={} deliver={:.9}",
                    self.id,
                    src,
                    dir_name(dir),
                    ops.start,
                    ops.end,
                    payload,
                    x.delivered
                ),
            );
            let msg = self.messages.len();
            self.messages.push(SentMessage {
                source: src,
                direction: dir,
                ops,
                payload,
                enqueued: now,
                start: x.start,
                serialized: x.serialized,
                delivered: x.delivered,
            });
            self.push(x.delivered, Kind::Deliver { msg, fragment })?;
        }
        Ok(())
    }

    fn try_start(&mut self, ep: &mut Endpoint, now: f64) -> Result<()> {
        while !ep.busy && ep.next < self.graph.len() {
            let i = ep.next;
            let ops = share(self.plan, i, ep.role);
            if ops.is_empty() {
                ep.done[i] = ep.prev;
                ep.next += 1;
                continue;
            }
            for &p in &self.graph.layer(i).parents {
                if let Some(need) = incoming(self.plan, i, p, ep.role) {
                    if !need.is_empty() && !ep.arrived.get(&p).is_some_and(|a| need.is_subset(a)) {
                        return Ok(());
                    }
                }
            }
            let c = compute_time(self.profile, i, ops, ep.role);
            self.log.record(
                now,
                "compute",
                format_args!(
                    "inf={} role={} layer={} ops={} dur={:.9}",
                    self.id, ep.role, i, ops, c
                ),
            );
            ep.compute.push((now, now + c));
            ep.busy = true;
            self.push(
                now + c,
                Kind::ComputeDone {
                    role: ep.role,
                    layer: i,
                },
            )?;
        }
        Ok(())
    }

    fn finish_layer(&mut self, ep: &mut Endpoint, i: usize, t: f64) -> Result<()> {
        ep.busy = false;
        ep.prev = t;
        ep.done[i] = t;
        ep.next += 1;
        if self.tensors {
            let src = Source::Layer(i);
            for rows in axis_runs(self.graph, src, share(self.plan, i, ep.role)) {
                let f = compute_rows(self.graph, i, rows, &ep.store)?;
                ep.store.insert(f);
            }
        }
        self.send(ep, Source::Layer(i), t)
    }
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::ToServer => "to_server",
        Direction::ToRobot => "to_robot",
    }
}

/// Replays one inference of `plan` starting at absolute time `start`. With
/// `input`, tensors are computed and moved exactly as a live run would.
#[allow(clippy::too_many_arguments)]
pub fn simulate_inference(
    graph: &ModelGraph,
    profile: &CostProfile,
    plan: &SchedulePlan,
    link: &mut SimLink,
    start: f64,
    input: Option<&Tensor>,
    log: &mut EventLog,
    id: u32,
) -> Result<SimOutcome> {
    let n = graph.len();
    if plan.layers.len() != n {
        return Err(Error::Invalid(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            n
        )));
    }
    let mut robot = Endpoint::new(Role::Robot, n, start);
    let mut server = Endpoint::new(Role::Server, n, start);
    if let Some(x) = input {
        if x.spec() != graph.input_spec() {
            return Err(Error::Shape(format!(
                "input {} does not match model input {}",
                x.spec(),
                graph.input_spec()
            )));
        }
        robot
            .store
            .insert(Fragment::whole(Source::Input, x.clone()));
    }
    let mut sim = Sim {
        graph,
        profile,
        plan,
        link,
        log,
        id,
        tensors: input.is_some(),
        queue: BinaryHeap::new(),
        seq: 0,
        messages: Vec::new(),
        terminal_at: f64::NEG_INFINITY,
    };
    sim.log.record(
        start,
        "start",
        format_args!("inf={} genome={:?}", id, plan.genome),
    );
    sim.send(&robot, Source::Input, start)?;
    sim.try_start(&mut robot, start)?;
    sim.try_start(&mut server, start)?;
    let mut end = start;
    while let Some(ev) = sim.queue.pop() {
        end = ev.t;
        match ev.kind {
            Kind::ComputeDone {
                role: Role::Robot,
                layer,
            } => {
                sim.finish_layer(&mut robot, layer, ev.t)?;
                sim.try_start(&mut robot, ev.t)?;
            }
            Kind::ComputeDone {
                role: Role::Server,
                layer,
            } => {
                sim.finish_layer(&mut server, layer, ev.t)?;
                sim.try_start(&mut server, ev.t)?;
            }
            Kind::Deliver { msg, fragment } => {
                let m = sim.messages[msg].clone();
                sim.log.record(
                    ev.t,
                    "deliver",
                    format_args!(
                        "inf={} src={} dir={} ops={}..{}",
                        id,
                        m.source,
                        dir_name(m.direction),
                        m.ops.start,
                        m.ops.end
                    ),
                );
                let ep = match m.direction {
                    Direction::ToServer => &mut server,
                    Direction::ToRobot => &mut robot,
                };
                ep.arrived
                    .entry(m.source)
                    .or_default()
                    .insert(m.ops.clone());
                if let Some(f) = fragment {
                    ep.store.insert(f);
                }
                if m.direction == Direction::ToRobot
                    && m.source == Source::Layer(graph.final_layer())
                {
                    sim.terminal_at = sim.terminal_at.max(ev.t);
                }
                sim.try_start(ep, ev.t)?;
            }
        }
    }
    for ep in [&robot, &server] {
        if ep.next != n {
            return Err(Error::Invariant(format!(
                "inference {}: {} stalled before layer {} (missing input messages)",
                id, ep.role, ep.next
            )));
        }
    }
    let last = n - 1;
    let mut done_at = robot.done[last];
    if !plan.terminal.is_empty() {
        done_at = done_at.max(sim.terminal_at);
    }
    let output = if sim.tensors {
        let rows = graph.output_spec().axis_len();
        Some(
            robot
                .store
                .assemble(graph, Source::Layer(last), 0..rows)?
                .tensor,
        )
    } else {
        None
    };
    sim.log.record(
        done_at,
        "done",
        format_args!("inf={} wall={:.9}", id, done_at - start),
    );
    let rel = |v: &[f64]| v.iter().map(|t| t - start).collect::<Vec<_>>();
    let rel_iv = |v: &[(f64, f64)]| {
        v.iter()
            .map(|(a, b)| (a - start, b - start))
            .collect::<Vec<_>>()
    };
    let messages = sim
        .messages
        .into_iter()
        .map(|m| SentMessage {
            enqueued: m.enqueued - start,
            start: m.start - start,
            serialized: m.serialized - start,
            delivered: m.delivered - start,
            ..m
        })
        .collect();
    Ok(SimOutcome {
        eval: Evaluation {
            t_robot: rel(&robot.done),
            t_server: rel(&server.done),
            objective: done_at - start,
            robot_compute: rel_iv(&robot.compute),
            server_compute: rel_iv(&server.compute),
            messages,
        },
        start,
        end: end.max(done_at),
        output,
    })
}

/// Settings for replaying a sequence of inferences over a trace.
#[derive(Clone, Debug)]
pub struct SessionConfig {
    /// Number of inferences; `None` runs until the trace ends.
    pub reps: Option<usize>,
    pub alpha: f64,
    /// Compute real tensors and check each output against local inference.
    pub tensors: bool,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            reps: None,
            alpha: EwmaPredictor::DEFAULT_ALPHA,
            tensors: false,
            seed: 0,
        }
    }
}

/// One inference of a session plus the baselines replayed from the same state.
#[derive(Clone, Debug)]
pub struct InferenceRecord {
    pub id: u32,
    pub start: f64,
    pub predicted_bps: f64,
    pub bucket: usize,
    pub bucket_bps: f64,
    pub hybrid: SimOutcome,
    pub local: SimOutcome,
    pub pp: SimOutcome,
    /// Output matched local inference bit for bit (tensor replays only).
    pub output_ok: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct SessionResult {
    pub records: Vec<InferenceRecord>,
    pub log: EventLog,
    /// Mean and standard deviation of the trace over the session.
    pub trace_stats: (f64, f64),
}

/// Runs inferences back to back. Each one predicts bandwidth from the trace
/// samples seen so far, picks the plan book bucket, and starts once the
/// previous inference has fully drained on both endpoints. An inference that
/// would finish after the trace ends is not recorded.
pub fn simulate_session(
    graph: &ModelGraph,
    book: &PlanBook,
    trace: &BandwidthTrace,
    cfg: &SessionConfig,
) -> Result<SessionResult> {
    book.verify(graph)?;
    let profile = &book.profile;
    let mut link = SimLink::new(trace.clone(), profile.link);
    let mut log = EventLog::new();
    let mut ewma = EwmaPredictor::new(cfg.alpha);
    let mut baselines: HashMap<usize, (SchedulePlan, SchedulePlan)> = HashMap::new();
    let input = cfg.tensors.then(|| demo_input(graph, cfg.seed));
    let reference = match &input {
        Some(x) => Some(graph.infer_local(x)?),
        None => None,
    };
    let mut records = Vec::new();
    let mut now = 0.0;
    loop {
        if cfg.reps.is_some_and(|r| records.len() >= r) {
            break;
        }
        if now >= trace.duration() {
            if let Some(reps) = cfg.reps {
                return Err(Error::TraceExhausted(format!(
                    "trace '{}' ends at {:.1} s after {} of {} inferences",
                    trace.name,
                    trace.duration(),
                    records.len(),
                    reps
                )));
            }
            break;
        }
        let id = records.len() as u32;
        let predicted = ewma.predict(trace, now);
        let bucket = book.select(predicted);
        let bucket_bps = book.buckets[bucket].bandwidth_bps;
        let mut events = EventLog::new();
        events.record(
            now,
            "select",
            format_args!(
                "inf={} predicted={:.3} bucket={} bucket_bps={}",
                id, predicted, bucket, bucket_bps
            ),
        );
        if let std::collections::hash_map::Entry::Vacant(e) = baselines.entry(bucket) {
            let problem = Problem::new(graph, profile, bucket_bps)?;
            e.insert((problem.plan(&problem.all_local())?, problem.best_pp()?));
        }
        let (local_plan, pp_plan) = &baselines[&bucket];
        let plan = &book.buckets[bucket].plan;

        let mut scratch = EventLog::new();
        let local = simulate_inference(
            graph,
            profile,
            local_plan,
            &mut link.clone(),
            now,
            None,
            &mut scratch,
            id,
        )?;
        let pp = simulate_inference(
            graph,
            profile,
            pp_plan,
            &mut link.clone(),
            now,
            None,
            &mut scratch,
            id,
        )?;
        let hybrid = simulate_inference(
            graph,
            profile,
            plan,
            &mut link,
            now,
            input.as_ref(),
            &mut events,
            id,
        )?;
        if hybrid.end > trace.duration() {
            if let Some(reps) = cfg.reps {
                return Err(Error::TraceExhausted(format!(
                    "trace '{}' ends at {:.1} s during inference {} of {}",
                    trace.name,
                    trace.duration(),
                    id + 1,
                    reps
                )));
            }
            log.record(
                now,
                "truncated",
                format_args!("inf={} would end at {:.9}", id, hybrid.end),
            );
            break;
        }
        log.append(events);
        let output_ok = match (&hybrid.output, &reference) {
            (Some(a), Some(b)) => Some(a.bit_eq(b)),
            _ => None,
        };
        now = hybrid.end;
        records.push(InferenceRecord {
            id,
            start: hybrid.start,
            predicted_bps: predicted,
            bucket,
            bucket_bps,
            hybrid,
            local,
            pp,
            output_ok,
        });
    }
    let trace_stats = match (records.first(), records.last()) {
        (Some(a), Some(b)) => trace.stats(
            a.start,
            b.hybrid.end.max(a.start + crate::netsim::SAMPLE_PERIOD),
        ),
        _ => (0.0, 0.0),
    };
    Ok(SessionResult {
        records,
        log,
        trace_stats,
    })
}

/// Deterministic pseudo-random model input.
pub fn demo_input(graph: &ModelGraph, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = graph.input_spec().clone();
    let data = (0..spec.numel())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    Tensor::new(spec, data).expect("sized to spec")
}

/// Wire-level message list of a replay: (source, direction, operator range).
pub fn message_list(out: &SimOutcome) -> Vec<(Source, Direction, Range<usize>)> {
    let mut v: Vec<_> = out
        .eval
        .messages
        .iter()
        .map(|m| (m.source, m.direction, m.ops.clone()))
        .collect();
    v.sort_by_key(|a| (a.0, a.1, a.2.start));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::LinkModel;
    use crate::model::{random_model, RandomModelConfig};
    use crate::sched::{evaluate_plan, solve_de, DeConfig};

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn replay_matches_model_and_reference() {
        for seed in 0..25u64 {
            let g = random_model(seed, &RandomModelConfig::default());
            let n = g.len();
            let r: Vec<f64> = (0..n)
                .map(|i| 1e-3 * (1.0 + (i as f64 * 0.7 + seed as f64).sin().abs()))
                .collect();
            let s: Vec<f64> = r.iter().map(|v| v / 4.0).collect();
            let profile = CostProfile::synthetic(&g, &r, &s, LinkModel::default());
            let bw = 2e6 * (1 + seed % 5) as f64;
            let problem = Problem::new(&g, &profile, bw).unwrap();
            let cfg = DeConfig {
                population: 12,
                generations: 15,
                seed,
                ..DeConfig::default()
            };
            let x = demo_input(&g, seed);
            let want = g.infer_local(&x).unwrap();
            for plan in [
                solve_de(&problem, &cfg).unwrap(),
                problem.best_pp().unwrap(),
                problem.plan(&problem.all_local()).unwrap(),
            ] {
                let ev = evaluate_plan(&problem, &plan).unwrap();
                let trace = BandwidthTrace::constant(bw, 10.0).unwrap();
                let mut link = SimLink::new(trace, profile.link);
                let mut log = EventLog::new();
                let out =
                    simulate_inference(&g, &profile, &plan, &mut link, 0.0, Some(&x), &mut log, 0)
                        .unwrap();
                assert!(close(&out.eval.t_robot, &ev.t_robot), "seed {seed}");
                assert!(close(&out.eval.t_server, &ev.t_server), "seed {seed}");
                assert!((out.eval.objective - ev.objective).abs() < 1e-6);
                assert!(out.output.as_ref().unwrap().bit_eq(&want), "seed {seed}");
                let mut planned = plan.messages(&g);
                planned.sort_by_key(|a| (a.0, a.1, a.2.start));
                assert_eq!(message_list(&out), planned);
            }
        }
    }

    #[test]
    fn all_local_sends_nothing() {
        let g = random_model(3, &RandomModelConfig::default());
        let profile = CostProfile::flop_rate(&g, 1e9, 10.0, LinkModel::default());
        let problem = Problem::new(&g, &profile, 1e6).unwrap();
        let plan = problem.plan(&problem.all_local()).unwrap();
        let mut link = SimLink::new(BandwidthTrace::constant(1e6, 5.0).unwrap(), profile.link);
        let out = simulate_inference(
            &g,
            &profile,
            &plan,
            &mut link,
            0.0,
            None,
            &mut EventLog::new(),
            0,
        )
        .unwrap();
        assert!(out.eval.messages.is_empty());
        assert!(out.eval.server_compute.is_empty());
    }

    #[test]
    fn outage_at_end_of_trace_is_reported() {
        let g = random_model(4, &RandomModelConfig::default());
        let profile = CostProfile::flop_rate(&g, 1e6, 100.0, LinkModel::default());
        let problem = Problem::new(&g, &profile, 1e9).unwrap();
        let plan = problem.plan(&problem.all_server()).unwrap();
        let trace = BandwidthTrace::new("dead", vec![(0.0, 0.0)]).unwrap();
        let mut link = SimLink::new(trace, profile.link);
        let e = simulate_inference(
            &g,
            &profile,
            &plan,
            &mut link,
            0.0,
            None,
            &mut EventLog::new(),
            0,
        );
        assert!(matches!(e, Err(Error::TraceExhausted(_))));
    }

    #[test]
    fn inference_past_trace_end_is_dropped() {
        let g = random_model(4, &RandomModelConfig::default());
        let profile = CostProfile::flop_rate(&g, 1e6, 100.0, LinkModel::default());
        let book = crate::sched::build_planbook(
            &g,
            &profile,
            &[1e9],
            &DeConfig::default(),
            false,
            crate::cost::PowerStates::default(),
        )
        .unwrap();
        let mut samples: Vec<(f64, f64)> = (0..20).map(|k| (k as f64 / 10.0, 1e9)).collect();
        samples.push((2.0, 1e3));
        let trace = BandwidthTrace::new("tail", samples).unwrap();
        let s = simulate_session(&g, &book, &trace, &SessionConfig::default()).unwrap();
        assert!(!s.records.is_empty());
        assert!(s.records.iter().all(|r| r.hybrid.end <= trace.duration()));
        assert!(s.log.lines().last().unwrap().contains("truncated"));
        let selects = s
            .log
            .lines()
            .iter()
            .filter(|l| l.contains(" select "))
            .count();
        assert_eq!(selects, s.records.len());

        let cfg = SessionConfig {
            reps: Some(s.records.len() + 1),
            ..SessionConfig::default()
        };
        let e = simulate_session(&g, &book, &trace, &cfg);
        assert!(matches!(e, Err(Error::TraceExhausted(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn timeline_and_report_accounting(seed in 0u64..5_000, bw in 1e5f64..1e9) {
            let g = random_model(seed, &RandomModelConfig::default());
            let profile = CostProfile::flop_rate(&g, 1e8, 8.0, LinkModel::default());
            let problem = Problem::new(&g, &profile, bw).unwrap();
            let cfg = DeConfig { population: 12, generations: 10, seed, ..DeConfig::default() };
            for plan in [solve_de(&problem, &cfg).unwrap(), problem.best_pp().unwrap()] {
                let mut link = SimLink::new(BandwidthTrace::constant(bw, 1.0).unwrap(), profile.link);
                let o = simulate_inference(&g, &profile, &plan, &mut link, 0.0, None, &mut EventLog::new(), 0).unwrap();
                let tl = o.eval.timeline();
                proptest::prop_assert!((tl.wall() - o.wall()).abs() < 1e-3);
                let (wall, compute, transmit) = crate::report::durations(&o);
                proptest::prop_assert!(wall + 1e-12 >= compute.max(transmit));
                let share = 100.0 * transmit / wall;
                proptest::prop_assert!((0.0..=100.0).contains(&share));
            }
        }
    }
}
