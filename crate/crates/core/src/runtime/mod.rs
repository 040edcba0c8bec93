//! Executing a schedule plan on two endpoints.
//!
//! `sim` replays plans on a discrete-event core over a simulated link; `live`
//! runs the robot and server as separate processes over TCP. Both use the same
//! fragment bookkeeping and kernels, so their outputs match single-device
//! inference bit for bit.

pub mod live;
pub mod sim;
pub mod wire;

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use crate::cost::Role;
use crate::error::{Error, Result};
use crate::lop;
use crate::model::{ModelGraph, Source};
use crate::opset::RangeSet;
use crate::sched::{Direction, SchedulePlan};
use crate::tensor::{combine, run_layer_fragment, Fragment};

/// Operators of layer `i` assigned to `role`.
pub fn share(plan: &SchedulePlan, i: usize, role: Role) -> &RangeSet {
    match role {
        Role::Robot => &plan.layers[i].robot,
        Role::Server => &plan.layers[i].server,
    }
}

/// Direction of messages sent by `role`.
pub fn sending(role: Role) -> Direction {
    match role {
        Role::Robot => Direction::ToServer,
        Role::Server => Direction::ToRobot,
    }
}

/// Operators `role` must receive from `source` before running layer `i`.
pub fn incoming(plan: &SchedulePlan, i: usize, source: Source, role: Role) -> Option<&RangeSet> {
    let e = plan.edge(i, source)?;
    Some(match role {
        Role::Robot => &e.to_robot,
        Role::Server => &e.to_server,
    })
}

/// Output fragments held by one endpoint during one inference.
#[derive(Clone, Debug, Default)]
pub struct FragmentStore {
    frags: HashMap<Source, Vec<Fragment>>,
}

impl FragmentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, f: Fragment) {
        self.frags.entry(f.source).or_default().push(f);
    }

    /// Partition-axis rows of `src` held.
    pub fn held(&self, src: Source) -> RangeSet {
        let mut s = RangeSet::new();
        for f in self.frags.get(&src).into_iter().flatten() {
            s.insert(f.range.clone());
        }
        s
    }

    pub fn covers(&self, src: Source, rows: &Range<usize>) -> bool {
        self.held(src).contains_range(rows.clone())
    }

    /// Rows `rows` of `src` assembled from whatever fragments overlap them.
    pub fn assemble(
        &self,
        graph: &ModelGraph,
        src: Source,
        rows: Range<usize>,
    ) -> Result<Fragment> {
        let parts: Vec<&Fragment> = self
            .frags
            .get(&src)
            .into_iter()
            .flatten()
            .filter(|f| f.range.start < rows.end && rows.start < f.range.end)
            .collect();
        combine(&parts, rows, graph.spec_of(src))
    }

    pub fn clear(&mut self) {
        self.frags.clear();
    }
}

/// Input rows needed per parent to produce output rows `out` of layer `i`.
pub fn needed_rows(
    graph: &ModelGraph,
    i: usize,
    out: Range<usize>,
) -> Result<Vec<(Source, Range<usize>)>> {
    let layer = graph.layer(i);
    let rows = lop::required_rows(layer, out)?;
    Ok(layer.parents.iter().copied().zip(rows).collect())
}

/// Computes output rows `out` of layer `i` from fragments in `store`.
pub fn compute_rows(
    graph: &ModelGraph,
    i: usize,
    out: Range<usize>,
    store: &FragmentStore,
) -> Result<Fragment> {
    let inputs = needed_rows(graph, i, out.clone())?
        .into_iter()
        .map(|(src, rows)| store.assemble(graph, src, rows))
        .collect::<Result<Vec<_>>>()?;
    run_layer_fragment(graph.layer(i), &inputs, out)
}

/// Partition-axis runs covering operator set `ops` of `src`.
pub fn axis_runs(graph: &ModelGraph, src: Source, ops: &RangeSet) -> Vec<Range<usize>> {
    graph.ops_to_axis(src, ops).ranges().collect()
}

/// Fragment stores shared between an endpoint's compute, transmit and receive
/// workers, one per inference in flight. Writers insert fragments and wake
/// waiters; the compute worker blocks only on the rows it needs next.
#[derive(Debug, Default)]
pub struct SharedStore {
    state: Mutex<SharedState>,
    ready: Condvar,
}

#[derive(Debug, Default)]
struct SharedState {
    stores: HashMap<u32, FragmentStore>,
    failed: Option<String>,
}

impl SharedStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, id: u32, f: Fragment) {
        let mut s = self.state.lock().unwrap();
        s.stores.entry(id).or_default().insert(f);
        self.ready.notify_all();
    }

    /// Drops everything held for inference `id`.
    pub fn finish(&self, id: u32) {
        self.state.lock().unwrap().stores.remove(&id);
    }

    /// Wakes all waiters with an error; later waits fail with it too.
    pub fn fail(&self, msg: impl Into<String>) {
        let mut s = self.state.lock().unwrap();
        if s.failed.is_none() {
            s.failed = Some(msg.into());
        }
        self.ready.notify_all();
    }

    /// Forgets a failure that ended only the request it belonged to.
    pub fn clear_failure(&self) {
        self.state.lock().unwrap().failed = None;
    }

    pub fn failure(&self) -> Option<String> {
        self.state.lock().unwrap().failed.clone()
    }

    /// Blocks until every `(source, rows)` pair of inference `id` is held, then
    /// assembles them. Rows already held are served even after a failure.
    pub fn wait_assemble(
        &self,
        graph: &ModelGraph,
        id: u32,
        needs: &[(Source, Range<usize>)],
        deadline: Instant,
    ) -> Result<Vec<Fragment>> {
        let mut s = self.state.lock().unwrap();
        loop {
            let store = s.stores.entry(id).or_default();
            if needs.iter().all(|(src, r)| store.covers(*src, r)) {
                return needs
                    .iter()
                    .map(|(src, r)| store.assemble(graph, *src, r.clone()))
                    .collect();
            }
            if let Some(e) = &s.failed {
                return Err(Error::Inference { id, msg: e.clone() });
            }
            let store = s.stores.entry(id).or_default();
            let now = Instant::now();
            if now >= deadline {
                let missing: Vec<String> = needs
                    .iter()
                    .filter(|(src, r)| !store.covers(*src, r))
                    .map(|(src, r)| format!("{} rows {:?}", src, r))
                    .collect();
                return Err(Error::Timeout(format!(
                    "inference {}: still waiting for {}",
                    id,
                    missing.join(", ")
                )));
            }
            s = self.ready.wait_timeout(s, deadline - now).unwrap().0;
        }
    }
}
