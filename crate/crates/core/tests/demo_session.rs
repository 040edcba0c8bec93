use hybridpar::cost::{CostProfile, LinkModel, PowerStates, DEMO_ROBOT_FLOPS, DEMO_SERVER_SPEEDUP};
use hybridpar::model::demo_model;
use hybridpar::netsim::{synth_trace, TraceKind};
use hybridpar::report::Report;
use hybridpar::runtime::sim::{simulate_session, SessionConfig};
use hybridpar::sched::{build_planbook, DeConfig};

#[test]
fn hybrid_beats_pipeline_on_outdoor_traces() {
    let g = demo_model();
    let c = CostProfile::flop_rate(
        &g,
        DEMO_ROBOT_FLOPS,
        DEMO_SERVER_SPEEDUP,
        LinkModel::default(),
    );
    let buckets = [10e6, 30e6, 50e6, 70e6, 90e6];
    let book = build_planbook(
        &g,
        &c,
        &buckets,
        &DeConfig::default(),
        false,
        PowerStates::default(),
    )
    .unwrap();
    for seed in [1, 4, 7] {
        let trace = synth_trace(TraceKind::OutdoorLike, 120.0, seed).unwrap();
        let s = simulate_session(&g, &book, &trace, &SessionConfig::default()).unwrap();
        let r = Report::from_session(&s, &trace, &PowerStates::default()).unwrap();
        let (hybrid, pp, local) = (
            r.stat(|x| x.wall).mean,
            r.stat(|x| x.pp_wall).mean,
            r.stat(|x| x.local_wall).mean,
        );
        assert!(hybrid <= pp, "seed {seed}: hybrid {hybrid} vs PP {pp}");
        assert!(
            hybrid <= local,
            "seed {seed}: hybrid {hybrid} vs local {local}"
        );
        for row in &r.rows {
            let want = hybridpar::cost::energy_per_inference(
                &s.records[row.inference as usize].hybrid.eval.timeline(),
                &PowerStates::default(),
            )
            .unwrap();
            assert_eq!(row.energy, want);
        }
    }
}
