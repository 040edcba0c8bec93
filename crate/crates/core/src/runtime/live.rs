//! Robot and server endpoints over one TCP connection.
//!
//! After the handshake each endpoint runs three workers: the caller's thread
//! computes layers in topological order, a transmit worker drains the ordered
//! send queue, and a receive worker files incoming fragments into the shared
//! store. Sends are queued as soon as the fragments they carry exist.

use std::io::Write as _;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::ops::Range;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::wire::{compress, decompress, layer_id, read_frame, write_frame, Frame, MsgType};
use super::{axis_runs, needed_rows, sending, share, SharedStore};
use crate::cost::{
    profile_model, CostProfile, DeviceProfile, LinkModel, PowerStates, ProfileMode, Role,
};
use crate::error::{Error, Result};
use crate::model::{decode_bundle, encode_bundle, ModelGraph, Source};
use crate::opset::RangeSet;
use crate::sched::{build_planbook, DeConfig, PlanBook, SchedulePlan};
use crate::tensor::{run_layer_fragment, Fragment, Tensor};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize, Deserialize)]
struct RobotHello {
    version: u32,
    model: String,
    planbook: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ServerHello {
    version: u32,
    need_model: bool,
    need_profile: bool,
    planbook: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ProfileInfo {
    robot: DeviceProfile,
    buckets: Vec<f64>,
    solver: DeConfig,
    exhaustive: bool,
    link: LinkModel,
}

/// A FRAGMENT or RESULT frame seen on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireRecord {
    pub inference: u32,
    pub kind: MsgType,
    pub source: Source,
    pub ops: Range<usize>,
    pub bytes: usize,
    pub outgoing: bool,
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("serializable")
}

fn parse<T: for<'de> Deserialize<'de>>(f: &Frame) -> Result<T> {
    serde_json::from_slice(&f.payload)
        .map_err(|e| Error::Protocol(format!("bad {:?} payload: {}", f.kind, e)))
}

fn expect(stream: &mut TcpStream, kind: MsgType) -> Result<Frame> {
    let f = read_frame(stream)?;
    if f.kind == MsgType::Error {
        return Err(Error::Peer(f.text()));
    }
    if f.kind != kind {
        return Err(Error::Protocol(format!(
            "expected {:?}, got {:?}",
            kind, f.kind
        )));
    }
    Ok(f)
}

/// Tells the peer why the connection is being dropped, then drops it.
fn abort(stream: &mut TcpStream, e: Error) -> Error {
    let _ = write_frame(
        stream,
        &Frame::control(MsgType::Error, e.to_string().into_bytes()),
    );
    let _ = stream.shutdown(Shutdown::Both);
    e
}

/// Transmit and receive workers of one connection.
struct Workers {
    stream: TcpStream,
    tx: Option<Sender<Frame>>,
    ctrl: Receiver<Frame>,
    store: Arc<SharedStore>,
    traffic: Arc<Mutex<Vec<WireRecord>>>,
    writer: Option<JoinHandle<()>>,
    reader: Option<JoinHandle<()>>,
}

fn record(f: &Frame, outgoing: bool) -> Option<WireRecord> {
    matches!(f.kind, MsgType::Fragment | MsgType::Result).then(|| WireRecord {
        inference: f.inference,
        kind: f.kind,
        source: f.source(),
        ops: f.ops(),
        bytes: f.encoded_len(),
        outgoing,
    })
}

fn fragment_of(graph: &ModelGraph, f: &Frame) -> Result<Fragment> {
    let src = f.source();
    if let Source::Layer(i) = src {
        if i >= graph.len() {
            return Err(Error::Protocol(format!("fragment for unknown layer {}", i)));
        }
    }
    let ops = f.ops();
    if ops.is_empty() || ops.end > graph.ops_of(src) {
        return Err(Error::Protocol(format!(
            "range {:?} invalid for {}",
            ops, src
        )));
    }
    let rows = graph
        .ops_to_axis(src, &RangeSet::from_range(ops))
        .hull()
        .expect("non-empty");
    let full = graph.spec_of(src);
    let spec = full.with_axis_len(rows.len());
    if f.dims
        .iter()
        .map(|&d| d as usize)
        .ne(spec.dims().iter().copied())
    {
        return Err(Error::Protocol(format!(
            "fragment dims {:?} do not match {}",
            f.dims, spec
        )));
    }
    let t = Tensor::from_le_bytes(spec, &f.payload).map_err(|e| Error::Protocol(e.to_string()))?;
    Fragment::new(src, rows, full.axis_len(), t)
}

impl Workers {
    fn spawn(stream: TcpStream, graph: Arc<ModelGraph>) -> Result<Workers> {
        let store = Arc::new(SharedStore::new());
        let traffic = Arc::new(Mutex::new(Vec::new()));
        let (tx, rx) = mpsc::channel::<Frame>();
        let (ctrl_tx, ctrl) = mpsc::channel::<Frame>();

        let mut out = stream.try_clone().map_err(Error::Network)?;
        let st = store.clone();
        let writer = std::thread::spawn(move || {
            for f in rx {
                if let Err(e) = out.write_all(&f.encode()).and_then(|_| out.flush()) {
                    st.fail(format!("send failed: {}", e));
                    break;
                }
            }
        });

        let mut inp = stream.try_clone().map_err(Error::Network)?;
        let (st, tr) = (store.clone(), traffic.clone());
        let reader = std::thread::spawn(move || loop {
            match read_frame(&mut inp) {
                Ok(f) if matches!(f.kind, MsgType::Fragment | MsgType::Result) => {
                    match fragment_of(&graph, &f) {
                        Ok(frag) => {
                            tr.lock().unwrap().extend(record(&f, false));
                            st.insert(f.inference, frag);
                        }
                        Err(e) => {
                            st.fail(e.to_string());
                            break;
                        }
                    }
                }
                Ok(f) => {
                    if f.kind == MsgType::Error {
                        st.fail(format!("peer reported: {}", f.text()));
                    }
                    if ctrl_tx.send(f).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    st.fail(format!("connection lost: {}", e));
                    break;
                }
            }
        });
        Ok(Workers {
            stream,
            tx: Some(tx),
            ctrl,
            store,
            traffic,
            writer: Some(writer),
            reader: Some(reader),
        })
    }

    fn send(&self, f: Frame) -> Result<()> {
        if let Some(r) = record(&f, true) {
            self.traffic.lock().unwrap().push(r);
        }
        self.tx
            .as_ref()
            .and_then(|tx| tx.send(f).ok())
            .ok_or_else(|| Error::Peer("transmit worker stopped".into()))
    }

    /// Drains the send queue, closes our side and waits for the workers.
    fn close(&mut self, linger: Duration) {
        self.tx.take();
        if let Some(w) = self.writer.take() {
            let _ = w.join();
        }
        let _ = self.stream.shutdown(Shutdown::Write);
        let _ = self.stream.set_read_timeout(Some(linger));
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        if self.reader.is_some() {
            let _ = self.stream.shutdown(Shutdown::Both);
            self.close(Duration::from_millis(10));
        }
    }
}

/// Compute worker of one endpoint for one inference.
struct Share<'a> {
    graph: &'a ModelGraph,
    workers: &'a Workers,
    plan: &'a SchedulePlan,
    role: Role,
    id: u32,
    timeout: Duration,
    t0: Instant,
    compute: Vec<(f64, f64)>,
}

impl Share<'_> {
    fn send_outgoing(&mut self, src: Source) -> Result<()> {
        for ops in self.plan.outgoing(self.graph, src, sending(self.role)) {
            let set = RangeSet::from_range(ops.clone());
            let rows = self.graph.ops_to_axis(src, &set).hull().expect("non-empty");
            let frag = self.wait(&[(src, rows)])?.pop().expect("one fragment");
            let last = src == Source::Layer(self.graph.final_layer());
            let kind = if self.role == Role::Server && last {
                MsgType::Result
            } else {
                MsgType::Fragment
            };
            self.workers.send(Frame {
                kind,
                inference: self.id,
                layer: layer_id(src),
                range: ops.start as u32..ops.end as u32,
                dims: frag.tensor.dims().iter().map(|&d| d as u32).collect(),
                payload: frag.tensor.to_le_bytes(),
            })?;
        }
        Ok(())
    }

    fn wait(&self, needs: &[(Source, Range<usize>)]) -> Result<Vec<Fragment>> {
        self.workers
            .store
            .wait_assemble(self.graph, self.id, needs, Instant::now() + self.timeout)
    }

    fn run(&mut self, input: Option<&Tensor>) -> Result<Option<Tensor>> {
        if let Some(x) = input {
            self.workers
                .store
                .insert(self.id, Fragment::whole(Source::Input, x.clone()));
            self.send_outgoing(Source::Input)?;
        }
        for i in 0..self.graph.len() {
            let ops = share(self.plan, i, self.role);
            if ops.is_empty() {
                continue;
            }
            for rows in axis_runs(self.graph, Source::Layer(i), ops) {
                let inputs = self.wait(&needed_rows(self.graph, i, rows.clone())?)?;
                let c0 = self.t0.elapsed().as_secs_f64();
                let f = run_layer_fragment(self.graph.layer(i), &inputs, rows)?;
                self.compute.push((c0, self.t0.elapsed().as_secs_f64()));
                self.workers.store.insert(self.id, f);
            }
            self.send_outgoing(Source::Layer(i))?;
        }
        if self.role == Role::Robot {
            let last = Source::Layer(self.graph.final_layer());
            let n = self.graph.output_spec().axis_len();
            return Ok(Some(
                self.wait(&[(last, 0..n)])?
                    .pop()
                    .expect("one fragment")
                    .tensor,
            ));
        }
        Ok(None)
    }
}

fn run_share(
    graph: &ModelGraph,
    workers: &Workers,
    plan: &SchedulePlan,
    role: Role,
    id: u32,
    timeout: Duration,
    input: Option<&Tensor>,
) -> Result<(Option<Tensor>, Vec<(f64, f64)>)> {
    let mut s = Share {
        graph,
        workers,
        plan,
        role,
        id,
        timeout,
        t0: Instant::now(),
        compute: Vec::new(),
    };
    let r = s.run(input);
    workers.store.finish(id);
    let out = r.map_err(|e| match e {
        Error::Inference { .. } | Error::Timeout(_) => e,
        other => Error::Inference {
            id,
            msg: other.to_string(),
        },
    })?;
    Ok((out, s.compute))
}

#[derive(Clone, Debug)]
pub struct RobotConfig {
    pub timeout: Duration,
    pub buckets: Vec<f64>,
    pub solver: DeConfig,
    pub exhaustive: bool,
    pub link: LinkModel,
    /// This device's profile, sent to the server when it needs to plan.
    pub profile: DeviceProfile,
    /// Where the plan book is cached between sessions.
    pub planbook_cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Handshake {
    pub planbook_checksum: String,
    /// The server profiled and planned during this handshake.
    pub profiled: bool,
    /// A plan book frame crossed the wire.
    pub planbook_sent: bool,
}

#[derive(Clone, Debug)]
pub struct LiveInference {
    pub id: u32,
    pub bucket: usize,
    pub output: Tensor,
    pub wall: f64,
    /// Robot compute intervals relative to the start of the inference.
    pub compute: Vec<(f64, f64)>,
}

pub struct Robot {
    graph: Arc<ModelGraph>,
    book: PlanBook,
    workers: Workers,
    timeout: Duration,
    next_id: u32,
    pub handshake: Handshake,
}

impl Robot {
    pub fn connect(addr: impl ToSocketAddrs, graph: ModelGraph, cfg: RobotConfig) -> Result<Robot> {
        let mut stream = TcpStream::connect(addr).map_err(Error::Network)?;
        stream.set_nodelay(true).map_err(Error::Network)?;
        let (book, handshake) = match robot_handshake(&mut stream, &graph, &cfg) {
            Ok(v) => v,
            Err(e @ Error::Peer(_)) => return Err(e),
            Err(e) => return Err(abort(&mut stream, e)),
        };
        let graph = Arc::new(graph);
        let workers = Workers::spawn(stream, graph.clone())?;
        Ok(Robot {
            graph,
            book,
            workers,
            timeout: cfg.timeout,
            next_id: 0,
            handshake,
        })
    }

    pub fn book(&self) -> &PlanBook {
        &self.book
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Runs one inference with the plan of the bucket chosen for `predicted_bps`.
    pub fn infer_predicted(&mut self, input: &Tensor, predicted_bps: f64) -> Result<LiveInference> {
        let b = self.book.select(predicted_bps);
        self.infer(input, b)
    }

    pub fn infer(&mut self, input: &Tensor, bucket: usize) -> Result<LiveInference> {
        if input.spec() != self.graph.input_spec() {
            return Err(Error::Shape(format!(
                "input {} does not match model input {}",
                input.spec(),
                self.graph.input_spec()
            )));
        }
        let id = self.next_id;
        self.next_id += 1;
        let t0 = Instant::now();
        self.workers.send(Frame {
            inference: id,
            layer: bucket as u32,
            ..Frame::control(MsgType::StartInference, vec![])
        })?;
        let Some(plan) = self.book.plan(bucket) else {
            // Let the server judge the bucket; it answers with an error.
            return match self.workers.ctrl.recv_timeout(self.timeout) {
                Ok(f) if f.kind == MsgType::Error => {
                    self.workers.store.clear_failure();
                    Err(Error::Peer(f.text()))
                }
                Ok(f) => Err(Error::Protocol(format!(
                    "expected an error for bucket {}, got {:?}",
                    bucket, f.kind
                ))),
                Err(_) => Err(Error::Timeout(format!(
                    "no answer for unknown bucket {}",
                    bucket
                ))),
            };
        };
        let (out, compute) = run_share(
            &self.graph,
            &self.workers,
            plan,
            Role::Robot,
            id,
            self.timeout,
            Some(input),
        )?;
        Ok(LiveInference {
            id,
            bucket,
            output: out.expect("robot output"),
            wall: t0.elapsed().as_secs_f64(),
            compute,
        })
    }

    /// FRAGMENT and RESULT frames sent and received so far.
    pub fn traffic(&self) -> Vec<WireRecord> {
        self.workers.traffic.lock().unwrap().clone()
    }

    /// Sends BYE and waits for the server to close the connection.
    pub fn close(mut self) -> Result<()> {
        let r = self.workers.send(Frame::control(MsgType::Bye, vec![]));
        self.workers.close(self.timeout);
        r
    }
}

fn robot_handshake(
    stream: &mut TcpStream,
    graph: &ModelGraph,
    cfg: &RobotConfig,
) -> Result<(PlanBook, Handshake)> {
    let cached = cfg
        .planbook_cache
        .as_ref()
        .filter(|p| p.exists())
        .and_then(|p| PlanBook::load(p).ok())
        .filter(|b| b.verify(graph).is_ok());
    let own = cached.as_ref().map(|b| b.checksum());
    let hello = RobotHello {
        version: PROTOCOL_VERSION,
        model: graph.checksum(),
        planbook: own.clone(),
    };
    write_frame(stream, &Frame::control(MsgType::Hello, json(&hello)))?;
    let reply: ServerHello = parse(&expect(stream, MsgType::Hello)?)?;
    if reply.version != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "server speaks version {}, robot {}",
            reply.version, PROTOCOL_VERSION
        )));
    }
    if reply.need_model {
        write_frame(
            stream,
            &Frame::control(MsgType::Model, compress(&encode_bundle(graph))),
        )?;
    }
    if reply.need_profile {
        let info = ProfileInfo {
            robot: cfg.profile.clone(),
            buckets: cfg.buckets.clone(),
            solver: cfg.solver,
            exhaustive: cfg.exhaustive,
            link: cfg.link,
        };
        write_frame(
            stream,
            &Frame::control(MsgType::ProfileInfo, compress(&json(&info))),
        )?;
    }
    if !reply.need_profile && reply.planbook.is_some() && reply.planbook == own {
        let sum = own.expect("checked");
        return Ok((
            cached.expect("checked"),
            Handshake {
                planbook_checksum: sum,
                profiled: false,
                planbook_sent: false,
            },
        ));
    }
    let f = expect(stream, MsgType::Planbook)?;
    let text = String::from_utf8(decompress(&f.payload)?)
        .map_err(|_| Error::Protocol("plan book is not UTF-8".into()))?;
    let book = PlanBook::from_text(&text)?;
    book.verify(graph)?;
    let sum = book.checksum();
    if let Some(announced) = reply.planbook.filter(|_| !reply.need_profile) {
        if announced != sum {
            return Err(Error::Checksum(format!(
                "plan book checksum {} differs from announced {}",
                sum, announced
            )));
        }
    }
    if let Some(p) = &cfg.planbook_cache {
        book.save(p)?;
    }
    Ok((
        book,
        Handshake {
            planbook_checksum: sum,
            profiled: reply.need_profile,
            planbook_sent: true,
        },
    ))
}

/// How the server obtains its own profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ServerProfile {
    Measure(ProfileMode),
    /// The robot's table divided by a speedup factor.
    RobotScaled(f64),
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub timeout: Duration,
    pub profile: ServerProfile,
    pub power: PowerStates,
    /// A model already on disk; otherwise the robot sends it.
    pub model: Option<ModelGraph>,
    pub planbook_cache: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            timeout: DEFAULT_TIMEOUT,
            profile: ServerProfile::Measure(ProfileMode::Measured { reps: 3, seed: 0 }),
            power: PowerStates::default(),
            model: None,
            planbook_cache: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServeSummary {
    pub inferences: u32,
    pub handshake: Handshake,
    pub traffic: Vec<WireRecord>,
}

/// Accepts one robot and serves it until BYE.
pub fn listen_once(listener: &TcpListener, cfg: ServerConfig) -> Result<ServeSummary> {
    let (stream, _) = listener.accept().map_err(Error::Network)?;
    serve(stream, cfg)
}

pub fn serve(mut stream: TcpStream, cfg: ServerConfig) -> Result<ServeSummary> {
    stream.set_nodelay(true).map_err(Error::Network)?;
    let (graph, book, handshake) = match server_handshake(&mut stream, &cfg) {
        Ok(v) => v,
        Err(e @ (Error::Peer(_) | Error::Network(_))) => return Err(e),
        Err(e) => return Err(abort(&mut stream, e)),
    };
    let graph = Arc::new(graph);
    let mut workers = Workers::spawn(stream, graph.clone())?;
    let mut count = 0;
    let result = loop {
        let f = match workers.ctrl.recv_timeout(Duration::from_secs(3600)) {
            Ok(f) => f,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => {
                let why = workers.store.failure().unwrap_or_default();
                break Err(Error::Peer(format!(
                    "robot disconnected without BYE ({})",
                    why
                )));
            }
        };
        match f.kind {
            MsgType::StartInference => {
                let (id, bucket) = (f.inference, f.layer as usize);
                let Some(plan) = book.plan(bucket) else {
                    let msg = format!(
                        "inference {}: unknown plan bucket {} (book has {})",
                        id,
                        bucket,
                        book.buckets.len()
                    );
                    workers.send(Frame {
                        inference: id,
                        ..Frame::control(MsgType::Error, msg.into_bytes())
                    })?;
                    continue;
                };
                if let Err(e) =
                    run_share(&graph, &workers, plan, Role::Server, id, cfg.timeout, None)
                {
                    let _ = workers.send(Frame {
                        inference: id,
                        ..Frame::control(MsgType::Error, e.to_string().into_bytes())
                    });
                    break Err(e);
                }
                count += 1;
            }
            MsgType::Bye => break Ok(()),
            MsgType::Error => break Err(Error::Peer(f.text())),
            other => {
                let e = Error::Protocol(format!("unexpected {:?} after handshake", other));
                let _ = workers.send(Frame::control(MsgType::Error, e.to_string().into_bytes()));
                break Err(e);
            }
        }
    };
    workers.close(Duration::from_millis(200));
    let traffic = workers.traffic.lock().unwrap().clone();
    result.map(|_| ServeSummary {
        inferences: count,
        handshake,
        traffic,
    })
}

fn server_handshake(
    stream: &mut TcpStream,
    cfg: &ServerConfig,
) -> Result<(ModelGraph, PlanBook, Handshake)> {
    let hello: RobotHello = parse(&expect(stream, MsgType::Hello)?)?;
    if hello.version != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "robot speaks version {}, server {}",
            hello.version, PROTOCOL_VERSION
        )));
    }
    let known = cfg
        .model
        .as_ref()
        .filter(|g| g.checksum() == hello.model)
        .cloned();
    let cached = cfg
        .planbook_cache
        .as_ref()
        .filter(|p| p.exists())
        .and_then(|p| PlanBook::load(p).ok())
        .filter(|b| b.model == hello.model);
    let reply = ServerHello {
        version: PROTOCOL_VERSION,
        need_model: known.is_none(),
        need_profile: cached.is_none(),
        planbook: cached.as_ref().map(|b| b.checksum()),
    };
    write_frame(stream, &Frame::control(MsgType::Hello, json(&reply)))?;
    let graph = match known {
        Some(g) => g,
        None => {
            let f = expect(stream, MsgType::Model)?;
            let g = decode_bundle(&decompress(&f.payload)?)?;
            if g.checksum() != hello.model {
                return Err(Error::Checksum(format!(
                    "received model {} but robot announced {}",
                    g.checksum(),
                    hello.model
                )));
            }
            g
        }
    };
    let (book, profiled) = match cached {
        Some(b) => {
            b.verify(&graph)?;
            (b, false)
        }
        None => {
            let f = expect(stream, MsgType::ProfileInfo)?;
            let info: ProfileInfo = serde_json::from_slice(&decompress(&f.payload)?)
                .map_err(|e| Error::Protocol(format!("bad profile info: {}", e)))?;
            if info.robot.model != graph.checksum() || info.robot.layers.len() != graph.len() {
                return Err(Error::Checksum(
                    "robot profile does not belong to the model".into(),
                ));
            }
            let own = match cfg.profile {
                ServerProfile::Measure(mode) => profile_model(&graph, Role::Server, mode)?,
                ServerProfile::RobotScaled(f) => info.robot.scaled(Role::Server, f),
            };
            let profile =
                CostProfile::from_devices(&info.robot, &own, info.link)?.for_graph(&graph)?;
            let book = build_planbook(
                &graph,
                &profile,
                &info.buckets,
                &info.solver,
                info.exhaustive,
                cfg.power,
            )?;
            if let Some(p) = &cfg.planbook_cache {
                book.save(p)?;
            }
            (book, true)
        }
    };
    let sum = book.checksum();
    let sent = profiled || hello.planbook.as_deref() != Some(sum.as_str());
    if sent {
        write_frame(
            stream,
            &Frame::control(MsgType::Planbook, compress(book.to_text().as_bytes())),
        )?;
    }
    Ok((
        graph,
        book,
        Handshake {
            planbook_checksum: sum,
            profiled,
            planbook_sent: sent,
        },
    ))
}
