use std::collections::BTreeMap;
use std::fs;

use cooprpl::sim::generate_traffic;
use cooprpl::sweep::{compare_csv, CSV_HEADER};
use cooprpl::topology::NodePlacement;
use cooprpl::trace::write_jsonl;
use cooprpl::{
    echo_config, parse_scenario, parse_scenario_str, run_scenario, run_sweep, NodeId, Protocol, RoutingClass,
    ScenarioConfig, Simulation, SweepSpec,
};

#[test]
fn sources_are_uniform() {
    let sources: Vec<NodeId> = (1..=10).map(NodeId).collect();
    let n = 100_000u32;
    let gens = generate_traffic(&sources, n, 0, 2 * n as u64, 42);
    assert_eq!(gens.len(), n as usize);
    let mut hist: BTreeMap<NodeId, u32> = BTreeMap::new();
    for g in &gens {
        *hist.entry(g.source).or_default() += 1;
    }
    assert_eq!(hist.len(), sources.len());
    let expected = n as f64 / sources.len() as f64;
    for (node, count) in hist {
        let rel = (count as f64 - expected).abs() / expected;
        assert!(rel <= 0.05, "node {node}: {count} packets, {:.1}% off", rel * 100.0);
    }
}

#[test]
fn two_node_network_delivers_everything_first_try() {
    let placements = vec![
        NodePlacement { id: NodeId(0), x: 150.0, y: 150.0 },
        NodePlacement { id: NodeId(1), x: 160.0, y: 150.0 },
    ];
    for protocol in [Protocol::Rpl, Protocol::OppRpl, Protocol::CoopRpl] {
        let mut config = ScenarioConfig { protocol, n_packets: 50, ..ScenarioConfig::default() };
        config.channel.lsr_value = 1.0;
        let mut sim = Simulation::with_placements(config, placements.clone());
        let m = sim.run_traffic().unwrap();
        assert_eq!((m.sent, m.delivered, m.dropped), (50, 50, 0), "{protocol}");
        assert_eq!(m.mean_retransmissions, 0.0);
        assert_eq!(m.mean_delay_slots, Some(1.0));
    }
}

#[test]
fn event_log_replays_report() {
    let config = ScenarioConfig { n_packets: 300, seed: 5, ..ScenarioConfig::default() };
    let mut a = Simulation::new(config.clone()).unwrap();
    a.run_traffic().unwrap();
    let mut b = Simulation::new(config.clone()).unwrap();
    b.run_traffic().unwrap();
    assert!(!a.event_log().is_empty());
    assert_eq!(a.event_log(), b.event_log());
    assert_eq!(a.report(), b.report());
    assert_eq!(run_scenario(&config).unwrap(), a.report());
    assert!(a.event_log().windows(2).all(|w| (w[0].slot, w[0].kind, w[0].seq) < (w[1].slot, w[1].kind, w[1].seq)));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.toml");
    fs::write(
        &path,
        "[scenario]\nseed = 9\nn_packets = 400\n\n[channel]\nmode = \"physical\"\n\n[forwarding]\nprotocol = \"opp-rpl\"\n\n\
         [relay]\nclass = \"class-b\"\n\n[weights]\nclass_b = [0.1, 0.4, 0.4, 0.1]\n\n[sweep]\naxis = \"density\"\nvalues = [1.0, 2.0]\n",
    )
    .unwrap();
    let config = parse_scenario(&path).unwrap();
    assert_eq!(config.seed, 9);
    assert_eq!(config.protocol, Protocol::OppRpl);
    assert_eq!(config.class, RoutingClass::ClassB);
    assert_eq!(config.weights.get(RoutingClass::ClassB).as_array(), [0.1, 0.4, 0.4, 0.1]);
    let echoed = echo_config(&config);
    assert_eq!(parse_scenario_str(&echoed, "echo").unwrap(), config);
    assert_eq!(echo_config(&parse_scenario_str(&echoed, "echo").unwrap()), echoed);
}

#[test]
fn invalid_weights_report_their_line() {
    let text = "[scenario]\nseed = 1\n\n[weights]\nbest_effort = [0.5, 0.5, 0.5, 0.5]\n";
    let err = parse_scenario_str(text, "w.toml").unwrap_err();
    assert_eq!(err.line(), Some(5));
    assert!(err.to_string().contains("weights must sum to 1"), "{err}");
}

#[test]
fn trace_lines_are_json_objects() {
    let config = ScenarioConfig { n_packets: 100, ..ScenarioConfig::default() };
    let mut sim = Simulation::new(config).unwrap();
    sim.enable_trace();
    sim.run_traffic().unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, sim.trace(), Some("t")).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let (mut control, mut relay, mut packets) = (0, 0, 0);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["run"], "t");
        if v.get("type").is_some() {
            assert!(["DIO", "DIS", "DAO"].contains(&v["type"].as_str().unwrap()));
            control += 1;
        } else if v.get("candidates").is_some() {
            relay += 1;
        } else {
            assert!(v.get("packet_id").is_some() && v.get("transmissions").is_some());
            packets += 1;
        }
    }
    assert!(control > 0 && relay > 0);
    assert_eq!(packets, 100);
}

#[test]
fn csv_schema_and_low_lsr_gain() {
    let base = ScenarioConfig::default();
    let spec = SweepSpec {
        values: vec![0.5],
        classes: vec![RoutingClass::BestEffort],
        seeds: 10,
        ..SweepSpec::default()
    };
    let csv = run_sweep(&base, &spec).to_csv_string();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let width = CSV_HEADER.split(',').count();
    assert!(csv.lines().all(|l| l.split(',').count() == width));
    assert_eq!(csv.lines().count(), 1 + 3 * 11);
    let cmp = compare_csv(&csv).unwrap();
    assert_eq!(cmp.len(), 1);
    assert!(cmp[0].pdr_vs_rpl.unwrap() > 0.0, "{cmp:?}");
}
