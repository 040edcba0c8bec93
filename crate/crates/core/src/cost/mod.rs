//! Compute and transmit estimators, per-device operator time tables and the
//! set of layers whose output may not cross the link.

mod energy;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, Source};
use crate::opset::RangeSet;
use crate::tensor::{run_layer_full, Tensor};

pub use energy::{energy_per_inference, PowerStates, Timeline};

pub const PROFILE_FORMAT: &str = "hybridpar-profile";
pub const PROFILE_VERSION: u32 = 1;

/// Robot FLOP rate of the synthetic profile used when nothing is measured.
pub const DEMO_ROBOT_FLOPS: f64 = 1e9;
/// How many times faster the server is than the robot in that profile.
pub const DEMO_SERVER_SPEEDUP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Robot,
    Server,
}

impl Role {
    pub fn peer(self) -> Role {
        match self {
            Role::Robot => Role::Server,
            Role::Server => Role::Robot,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Robot => "robot",
            Role::Server => "server",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Role> {
        match s {
            "robot" => Ok(Role::Robot),
            "server" => Ok(Role::Server),
            _ => Err(Error::Invalid(format!(
                "role must be robot or server, got '{}'",
                s
            ))),
        }
    }
}

/// How `profile_model` obtains per-operator times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProfileMode {
    /// Median wall time of `reps` full-layer runs on random inputs.
    Measured { reps: usize, seed: u64 },
    /// Time proportional to the layer's floating-point work.
    FlopRate(f64),
    /// The same declared time for every operator.
    PerOp(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub id: usize,
    pub op_time: f64,
    pub out_bytes_per_op: u64,
}

/// One endpoint's profile of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub model: String,
    pub layers: Vec<LayerTiming>,
}

impl DeviceProfile {
    pub fn op_time(&self, layer: usize) -> f64 {
        self.layers[layer].op_time
    }

    /// Same table with every time divided by `factor`.
    pub fn scaled(&self, role: Role, factor: f64) -> DeviceProfile {
        let mut p = self.clone();
        p.role = role;
        for l in &mut p.layers {
            l.op_time /= factor;
        }
        p
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn from_json(s: &str) -> Result<DeviceProfile> {
        let p: DeviceProfile = serde_json::from_str(s)?;
        if p.format != PROFILE_FORMAT || p.version != PROFILE_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported profile format {} v{} (expected {} v{})",
                p.format, p.version, PROFILE_FORMAT, PROFILE_VERSION
            )));
        }
        if p.layers
            .iter()
            .enumerate()
            .any(|(i, l)| l.id != i || !(l.op_time >= 0.0) || !l.op_time.is_finite())
        {
            return Err(Error::Invalid(
                "profile layers must be numbered 0.. with finite times >= 0".into(),
            ));
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<DeviceProfile> {
        DeviceProfile::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Builds a per-operator time table for one device.
pub fn profile_model(graph: &ModelGraph, role: Role, mode: ProfileMode) -> Result<DeviceProfile> {
    let n = graph.len();
    let per_layer: Vec<f64> = match mode {
        ProfileMode::PerOp(t) => {
            if !(t >= 0.0) {
                return Err(Error::Invalid(format!(
                    "operator time must be >= 0, got {}",
                    t
                )));
            }
            graph
                .layers()
                .iter()
                .map(|l| t * l.operator_count as f64)
                .collect()
        }
        ProfileMode::FlopRate(rate) => {
            if !(rate > 0.0) {
                return Err(Error::Invalid(format!(
                    "flop rate must be > 0, got {}",
                    rate
                )));
            }
            graph.layers().iter().map(|l| l.flops() / rate).collect()
        }
        ProfileMode::Measured { reps, seed } => measure(graph, reps.max(1), seed)?,
    };
    let layers = graph
        .layers()
        .iter()
        .zip(per_layer)
        .map(|(l, t)| LayerTiming {
            id: l.id,
            op_time: t / l.operator_count as f64,
            out_bytes_per_op: graph.ops_bytes(Source::Layer(l.id), &RangeSet::from_range(0..1)),
        })
        .collect::<Vec<_>>();
    debug_assert_eq!(layers.len(), n);
    Ok(DeviceProfile {
        format: PROFILE_FORMAT.into(),
        version: PROFILE_VERSION,
        role,
        model: graph.checksum(),
        layers,
    })
}

/// Median whole-layer seconds per layer over `reps` random inputs.
fn measure(graph: &ModelGraph, reps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![Vec::with_capacity(reps); graph.len()];
    for _ in 0..reps {
        let spec = graph.input_spec().clone();
        let input = Tensor::new(
            spec.clone(),
            (0..spec.numel())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(graph.len());
        for l in graph.layers() {
            let ins: Vec<&Tensor> = l
                .parents
                .iter()
                .map(|p| match p {
                    Source::Input => &input,
                    Source::Layer(i) => &outs[*i],
                })
                .collect();
            let t0 = Instant::now();
            let y = run_layer_full(l, &ins)?;
            samples[l.id].push(t0.elapsed().as_secs_f64());
            outs.push(y);
        }
    }
    Ok(samples
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            let m = s.len() / 2;
            if s.len() % 2 == 1 {
                s[m]
            } else {
                (s[m - 1] + s[m]) / 2.0
            }
        })
        .collect())
}

/// Per-message overheads of the link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// One-way propagation latency added to every message, seconds.
    pub latency: f64,
    /// Framing bytes serialized with every message.
    pub header_bytes: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            latency: 0.001,
            header_bytes: 64,
        }
    }
}

impl LinkModel {
    pub fn ideal() -> Self {
        LinkModel {
            latency: 0.0,
            header_bytes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: usize,
    pub robot_op_time: f64,
    pub server_op_time: f64,
    pub out_bytes_per_op: u64,
}

/// Both endpoints' timing tables for one model plus the link overheads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub model: String,
    pub raw_input_bytes: u64,
    pub link: LinkModel,
    pub layers: Vec<LayerCost>,
}

impl CostProfile {
    pub fn from_devices(
        robot: &DeviceProfile,
        server: &DeviceProfile,
        link: LinkModel,
    ) -> Result<CostProfile> {
        if robot.model != server.model {
            return Err(Error::Checksum(format!(
                "robot profile is for model {}, server profile for {}",
                robot.model, server.model
            )));
        }
        if robot.layers.len() != server.layers.len() {
            return Err(Error::Invalid("profiles disagree on layer count".into()));
        }
        Ok(CostProfile {
            model: robot.model.clone(),
            raw_input_bytes: 0,
            link,
            layers: robot
                .layers
                .iter()
                .zip(&server.layers)
                .map(|(r, s)| LayerCost {
                    id: r.id,
                    robot_op_time: r.op_time,
                    server_op_time: s.op_time,
                    out_bytes_per_op: r.out_bytes_per_op,
                })
                .collect(),
        })
    }

    /// Profile checked against a graph (raw input size filled in).
    pub fn for_graph(mut self, graph: &ModelGraph) -> Result<CostProfile> {
        if self.layers.len() != graph.len() {
            return Err(Error::Invalid(format!(
                "profile has {} layers, model has {}",
                self.layers.len(),
                graph.len()
            )));
        }
        self.raw_input_bytes = graph.raw_input_bytes();
        Ok(self)
    }

    /// Synthetic profile: per-operator times from explicit per-layer values.
    pub fn synthetic(
        graph: &ModelGraph,
        robot_op: &[f64],
        server_op: &[f64],
        link: LinkModel,
    ) -> CostProfile {
        CostProfile {
            model: graph.checksum(),
            raw_input_bytes: graph.raw_input_bytes(),
            link,
            layers: graph
                .layers()
                .iter()
                .map(|l| LayerCost {
                    id: l.id,
                    robot_op_time: robot_op[l.id],
                    server_op_time: server_op[l.id],
                    out_bytes_per_op: graph
                        .ops_bytes(Source::Layer(l.id), &RangeSet::from_range(0..1)),
                })
                .collect(),
        }
    }

    /// FLOP-proportional profile with the server `speedup` times faster.
    pub fn flop_rate(
        graph: &ModelGraph,
        robot_flops: f64,
        speedup: f64,
        link: LinkModel,
    ) -> CostProfile {
        let r: Vec<f64> = graph
            .layers()
            .iter()
            .map(|l| l.flops() / robot_flops / l.operator_count as f64)
            .collect();
        let s: Vec<f64> = r.iter().map(|t| t / speedup).collect();
        CostProfile::synthetic(graph, &r, &s, link)
    }

    pub fn op_time(&self, layer: usize, role: Role) -> f64 {
        match role {
            Role::Robot => self.layers[layer].robot_op_time,
            Role::Server => self.layers[layer].server_op_time,
        }
    }
}

/// `compute(X)`: seconds to run operators `ops` of `layer` on `role`.
pub fn compute_time(profile: &CostProfile, layer: usize, ops: &RangeSet, role: Role) -> f64 {
    ops.len() as f64 * profile.op_time(layer, role)
}

/// FIFO queue of one link direction at a fixed bandwidth.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HalfLink {
    /// Time the last queued message finishes serializing.
    pub tail: f64,
}

/// Timing of one message on a half-link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Send {
    pub start: f64,
    pub serialized: f64,
    pub delivered: f64,
}

impl HalfLink {
    /// Queues `payload` bytes at time `now` and returns when they go out and arrive.
    pub fn send(&mut self, payload: u64, now: f64, bandwidth_bps: f64, link: &LinkModel) -> Send {
        let start = now.max(self.tail);
        let serialized = start + (payload + link.header_bytes) as f64 * 8.0 / bandwidth_bps;
        self.tail = serialized;
        Send {
            start,
            serialized,
            delivered: serialized + link.latency,
        }
    }
}

/// `transmit(X)`: seconds from `now` until `payload` bytes are delivered,
/// including the wait behind messages already queued until `link_tail`.
pub fn transmit_time(
    payload: u64,
    bandwidth_bps: f64,
    link_tail: f64,
    now: f64,
    link: &LinkModel,
) -> Result<f64> {
    if !(bandwidth_bps > 0.0) {
        return Err(Error::Invalid(format!(
            "bandwidth must be > 0, got {}",
            bandwidth_bps
        )));
    }
    if payload == 0 {
        return Ok(0.0);
    }
    let mut h = HalfLink { tail: link_tail };
    Ok(h.send(payload, now, bandwidth_bps, link).delivered - now)
}

/// Layers whose output is larger than the raw model input.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiSet {
    pub layers: Vec<usize>,
}

impl PiSet {
    pub fn of(graph: &ModelGraph) -> PiSet {
        let raw = graph.raw_input_bytes();
        PiSet {
            layers: graph
                .layers()
                .iter()
                .filter(|l| l.output_spec.bytes() > raw)
                .map(|l| l.id)
                .collect(),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }
}

/// `pi_set(graph, profile)`: uses the profile's recorded raw input size.
pub fn pi_set(graph: &ModelGraph, profile: &CostProfile) -> PiSet {
    let raw = if profile.raw_input_bytes > 0 {
        profile.raw_input_bytes
    } else {
        graph.raw_input_bytes()
    };
    PiSet {
        layers: graph
            .layers()
            .iter()
            .filter(|l| l.output_spec.bytes() > raw)
            .map(|l| l.id)
            .collect(),
    }
}
