use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::thread::JoinHandle;
use std::time::Duration;

use hybridpar::cost::{profile_model, CostProfile, DeviceProfile, LinkModel, ProfileMode, Role};
use hybridpar::model::{random_model, ModelGraph, RandomModelConfig, Source};
use hybridpar::runtime::live::{
    listen_once, Robot, RobotConfig, ServeSummary, ServerConfig, ServerProfile,
};
use hybridpar::runtime::sim::demo_input;
use hybridpar::runtime::wire::{compress, read_frame, write_frame, Frame, MsgType};
use hybridpar::sched::{
    Bucket, DeConfig, Direction, PlanBook, Problem, SchedulePlan, PLANBOOK_FORMAT, PLANBOOK_VERSION,
};
use hybridpar::{Error, Result};

const SPEEDUP: f64 = 8.0;

fn model(seed: u64, branches: bool) -> ModelGraph {
    random_model(
        seed,
        &RandomModelConfig {
            branches,
            group: 1,
            ..RandomModelConfig::default()
        },
    )
}

fn robot_profile(g: &ModelGraph) -> DeviceProfile {
    profile_model(g, Role::Robot, ProfileMode::FlopRate(1e8)).unwrap()
}

fn robot_cfg(g: &ModelGraph, cache: Option<&Path>) -> RobotConfig {
    RobotConfig {
        timeout: Duration::from_secs(10),
        buckets: vec![1e6, 2e8],
        solver: DeConfig {
            generations: 20,
            ..DeConfig::default()
        },
        exhaustive: false,
        link: LinkModel::default(),
        profile: robot_profile(g),
        planbook_cache: cache.map(Path::to_path_buf),
    }
}

fn server_cfg(model: Option<ModelGraph>, cache: Option<&Path>) -> ServerConfig {
    ServerConfig {
        timeout: Duration::from_secs(10),
        profile: ServerProfile::RobotScaled(SPEEDUP),
        model,
        planbook_cache: cache.map(Path::to_path_buf),
        ..ServerConfig::default()
    }
}

fn spawn_server(cfg: ServerConfig) -> (String, JoinHandle<Result<ServeSummary>>) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    (addr, std::thread::spawn(move || listen_once(&l, cfg)))
}

/// A book with hand-picked genomes, one per bucket.
fn fixed_book(g: &ModelGraph, genomes: &[Vec<usize>]) -> PlanBook {
    let r = robot_profile(g);
    let profile =
        CostProfile::from_devices(&r, &r.scaled(Role::Server, SPEEDUP), LinkModel::default())
            .unwrap()
            .for_graph(g)
            .unwrap();
    let buckets = genomes
        .iter()
        .enumerate()
        .map(|(k, gen)| {
            let bw = 1e6 * (k + 1) as f64;
            Bucket {
                bandwidth_bps: bw,
                plan: Problem::new(g, &profile, bw).unwrap().plan(gen).unwrap(),
            }
        })
        .collect();
    PlanBook {
        format: PLANBOOK_FORMAT.into(),
        version: PLANBOOK_VERSION,
        model: g.checksum(),
        profile,
        solver: DeConfig::default(),
        buckets,
    }
}

/// Robot-side view of the wire for one inference, as plan messages.
fn observed(robot: &Robot, id: u32) -> Vec<(Source, Direction, std::ops::Range<usize>)> {
    let mut v: Vec<_> = robot
        .traffic()
        .into_iter()
        .filter(|r| r.inference == id)
        .map(|r| {
            (
                r.source,
                if r.outgoing {
                    Direction::ToServer
                } else {
                    Direction::ToRobot
                },
                r.ops,
            )
        })
        .collect();
    v.sort_by_key(|m| (m.0, m.1, m.2.start, m.2.end));
    v
}

fn expected(
    g: &ModelGraph,
    plan: &SchedulePlan,
) -> Vec<(Source, Direction, std::ops::Range<usize>)> {
    let mut v = plan.messages(g);
    v.sort_by_key(|m| (m.0, m.1, m.2.start, m.2.end));
    v
}

#[test]
fn fresh_pair_agrees_and_outputs_match_local() {
    for seed in 0..6 {
        let g = model(seed, true);
        let (addr, server) = spawn_server(server_cfg(None, None));
        let mut robot = Robot::connect(&addr, g.clone(), robot_cfg(&g, None)).unwrap();
        assert!(robot.handshake.profiled && robot.handshake.planbook_sent);
        let input = demo_input(&g, seed);
        let want = g.infer_local(&input).unwrap();
        for b in [1, 0, 1] {
            let r = robot.infer(&input, b).unwrap();
            assert!(r.output.bit_eq(&want), "seed {seed} bucket {b}");
            assert_eq!(
                observed(&robot, r.id),
                expected(&g, robot.book().plan(b).unwrap()),
                "seed {seed}"
            );
        }
        let sum = robot.handshake.planbook_checksum.clone();
        robot.close().unwrap();
        let s = server.join().unwrap().unwrap();
        assert_eq!(s.inferences, 3);
        assert_eq!(s.handshake.planbook_checksum, sum);
    }
}

#[test]
fn cached_planbook_skips_profiling() {
    let dir = tempfile::tempdir().unwrap();
    let (rc, sc) = (
        dir.path().join("robot.json"),
        dir.path().join("server.json"),
    );
    let g = model(3, true);
    let (addr, server) = spawn_server(server_cfg(None, Some(&sc)));
    let robot = Robot::connect(&addr, g.clone(), robot_cfg(&g, Some(&rc))).unwrap();
    let first = robot.handshake.clone();
    robot.close().unwrap();
    server.join().unwrap().unwrap();
    assert!(first.profiled);
    assert_eq!(std::fs::read(&rc).unwrap(), std::fs::read(&sc).unwrap());

    let (addr, server) = spawn_server(server_cfg(Some(g.clone()), Some(&sc)));
    let mut robot = Robot::connect(&addr, g.clone(), robot_cfg(&g, Some(&rc))).unwrap();
    assert!(!robot.handshake.profiled);
    assert!(!robot.handshake.planbook_sent);
    assert_eq!(robot.handshake.planbook_checksum, first.planbook_checksum);
    let input = demo_input(&g, 1);
    assert!(robot
        .infer(&input, 1)
        .unwrap()
        .output
        .bit_eq(&g.infer_local(&input).unwrap()));
    robot.close().unwrap();
    let s = server.join().unwrap().unwrap();
    assert!(!s.handshake.profiled);
}

#[test]
fn baseline_plans_on_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let mut tested = 0;
    for seed in 0..12 {
        let g = model(seed, false);
        let r = robot_profile(&g);
        let profile =
            CostProfile::from_devices(&r, &r.scaled(Role::Server, SPEEDUP), LinkModel::default())
                .unwrap()
                .for_graph(&g)
                .unwrap();
        let p = Problem::new(&g, &profile, 1e6).unwrap();
        // Cuts the decoder leaves as a clean split: robot runs [0, k), server the rest.
        let n = g.len();
        let Some(k) = (0..n).find(|&k| {
            let (x, y) = p.decode(&p.pp_cut(k));
            (0..n).all(|i| {
                let ops = g.layer(i).operator_count;
                if i < k {
                    x[i].len() == ops && y[i].is_empty()
                } else {
                    x[i].is_empty() && y[i].len() == ops
                }
            })
        }) else {
            continue;
        };
        tested += 1;
        let book = fixed_book(&g, &[p.all_local(), p.pp_cut(k)]);
        let cache = dir.path().join(format!("book{seed}.json"));
        book.save(&cache).unwrap();
        let (addr, server) = spawn_server(server_cfg(Some(g.clone()), Some(&cache)));
        let mut robot = Robot::connect(&addr, g.clone(), robot_cfg(&g, Some(&cache))).unwrap();
        assert!(!robot.handshake.profiled);
        let input = demo_input(&g, seed);
        let want = g.infer_local(&input).unwrap();

        let local = robot.infer(&input, 0).unwrap();
        assert!(local.output.bit_eq(&want));
        assert!(
            observed(&robot, local.id).is_empty(),
            "all-local exchanged fragments"
        );

        let pp = robot.infer(&input, 1).unwrap();
        assert!(pp.output.bit_eq(&want));
        let msgs = observed(&robot, pp.id);
        let up: Vec<_> = msgs.iter().filter(|m| m.1 == Direction::ToServer).collect();
        let down: Vec<_> = msgs.iter().filter(|m| m.1 == Direction::ToRobot).collect();
        let cut_src = if k == 0 {
            Source::Input
        } else {
            Source::Layer(k - 1)
        };
        assert_eq!(up.len(), 1, "seed {seed} cut {k}: {msgs:?}");
        assert_eq!(up[0].0, cut_src);
        assert_eq!(down.len(), 1);
        assert_eq!(down[0].0, Source::Layer(g.final_layer()));
        let results = robot
            .traffic()
            .iter()
            .filter(|r| r.inference == pp.id && r.kind == MsgType::Result)
            .count();
        assert_eq!(results, 1);
        robot.close().unwrap();
        assert_eq!(server.join().unwrap().unwrap().inferences, 2);
    }
    assert!(tested >= 6, "only {tested} models had a clean cut");
}

#[test]
fn unknown_bucket_is_rejected_and_session_continues() {
    let g = model(5, true);
    let (addr, server) = spawn_server(server_cfg(None, None));
    let mut robot = Robot::connect(&addr, g.clone(), robot_cfg(&g, None)).unwrap();
    let input = demo_input(&g, 0);
    match robot.infer(&input, 7) {
        Err(Error::Peer(m)) => assert!(m.contains("unknown plan bucket 7"), "{m}"),
        other => panic!("expected a peer error, got {other:?}"),
    }
    let r = robot.infer(&input, 1).unwrap();
    assert!(r.output.bit_eq(&g.infer_local(&input).unwrap()));
    robot.close().unwrap();
    assert_eq!(server.join().unwrap().unwrap().inferences, 1);
}

fn fake_listener() -> (String, TcpListener) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    (l.local_addr().unwrap().to_string(), l)
}

/// Answers a robot's HELLO as a server that already holds `planbook`.
fn fake_hello(s: &mut TcpStream, planbook: &str) {
    let hello = read_frame(s).unwrap();
    assert_eq!(hello.kind, MsgType::Hello);
    let reply = serde_json::json!({ "version": 1, "need_model": false, "need_profile": false, "planbook": planbook });
    write_frame(
        s,
        &Frame::control(MsgType::Hello, reply.to_string().into_bytes()),
    )
    .unwrap();
}

#[test]
fn corrupted_planbook_frame_is_refused() {
    let g = model(2, true);
    let book = fixed_book(&g, &[vec![0; g.len()]]);
    let (addr, l) = fake_listener();
    let fake = std::thread::spawn(move || {
        let (mut s, _) = l.accept().unwrap();
        fake_hello(&mut s, &book.checksum());
        let mut bytes =
            Frame::control(MsgType::Planbook, compress(book.to_text().as_bytes())).encode();
        let k = bytes.len() / 2;
        bytes[k] ^= 0x10;
        std::io::Write::write_all(&mut s, &bytes).unwrap();
        let reply = read_frame(&mut s).unwrap();
        let after = read_frame(&mut s);
        (reply, after.is_err())
    });
    let err = Robot::connect(&addr, g.clone(), robot_cfg(&g, None))
        .err()
        .expect("handshake must fail");
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
    let (reply, closed) = fake.join().unwrap();
    assert_eq!(reply.kind, MsgType::Error);
    assert!(reply.text().contains("CRC"), "{}", reply.text());
    assert!(closed);
}

/// Handshake from a cached book, then drop the connection once inference starts.
fn robot_against_dropping_server(timeout: Duration, hang: bool) -> (Error, u32) {
    let dir = tempfile::tempdir().unwrap();
    let g = model(4, false);
    let book = fixed_book(&g, &[vec![0; g.len()]]);
    let cache = dir.path().join("book.json");
    book.save(&cache).unwrap();
    let (addr, l) = fake_listener();
    let sum = book.checksum();
    let fake = std::thread::spawn(move || {
        let (mut s, _) = l.accept().unwrap();
        fake_hello(&mut s, &sum);
        loop {
            let f = read_frame(&mut s).unwrap();
            if f.kind == MsgType::StartInference {
                break;
            }
        }
        if hang {
            std::thread::sleep(timeout * 3);
        }
    });
    let mut cfg = robot_cfg(&g, Some(&cache));
    cfg.timeout = timeout;
    let mut robot = Robot::connect(&addr, g.clone(), cfg).unwrap();
    let input = demo_input(&g, 0);
    let err = robot.infer(&input, 0).expect_err("inference must fail");
    fake.join().unwrap();
    (err, 0)
}

#[test]
fn peer_disconnect_names_the_inference() {
    let (err, id) = robot_against_dropping_server(Duration::from_secs(10), false);
    match err {
        Error::Inference { id: got, msg } => {
            assert_eq!(got, id);
            assert!(
                msg.contains("connection lost") || msg.contains("send failed"),
                "{msg}"
            );
        }
        other => panic!("expected an inference error, got {other:?}"),
    }
    assert_eq!(
        Error::Inference {
            id,
            msg: String::new()
        }
        .exit_code(),
        3
    );
}

#[test]
fn silent_peer_times_out() {
    let (err, _) = robot_against_dropping_server(Duration::from_millis(300), true);
    assert!(matches!(err, Error::Timeout(_)), "{err:?}");
}

#[test]
fn all_server_plan_matches_its_messages() {
    let dir = tempfile::tempdir().unwrap();
    let g = model(9, true);
    let r = robot_profile(&g);
    let profile =
        CostProfile::from_devices(&r, &r.scaled(Role::Server, SPEEDUP), LinkModel::default())
            .unwrap()
            .for_graph(&g)
            .unwrap();
    let p = Problem::new(&g, &profile, 1e6).unwrap();
    let book = fixed_book(&g, &[p.all_local(), p.all_server()]);
    let cache = dir.path().join("book.json");
    book.save(&cache).unwrap();
    let (addr, server) = spawn_server(server_cfg(Some(g.clone()), Some(&cache)));
    let mut robot = Robot::connect(&addr, g.clone(), robot_cfg(&g, Some(&cache))).unwrap();
    let input = demo_input(&g, 2);
    let want = g.infer_local(&input).unwrap();
    let a = robot.infer(&input, 0).unwrap();
    let b = robot.infer(&input, 1).unwrap();
    assert!(a.output.bit_eq(&want) && b.output.bit_eq(&want));
    let plan = book.plan(1).unwrap();
    if plan.layers.iter().all(|l| l.robot.is_empty()) {
        assert!(b.compute.is_empty());
    }
    assert_eq!(observed(&robot, b.id), expected(&g, plan));
    robot.close().unwrap();
    server.join().unwrap().unwrap();
}
