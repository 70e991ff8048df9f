//! Acceptance suite. Each test prints one PASS/FAIL line; run with
//! `cargo test -p cooprpl --test acceptance -- --nocapture`.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cooprpl::forwarding::{HopMachine, HopOutcome};
use cooprpl::relay::{select_relay, CandidateMetrics, RateScales};
use cooprpl::rpl::{compute_etx, default_path};
use cooprpl::sweep::{Aggregate, DEFAULT_DENSITY_VALUES};
use cooprpl::{
    parse_scenario, run_sweep, NodeId, Protocol, RateWeights, RoutingClass, ScenarioConfig, Simulation, SweepAxis,
    SweepResult, SweepSpec,
};

const CLASSES: [RoutingClass; 4] =
    [RoutingClass::ClassA, RoutingClass::ClassB, RoutingClass::ClassC, RoutingClass::BestEffort];
const BE: Option<RoutingClass> = Some(RoutingClass::BestEffort);

fn report(id: &str, pass: bool, detail: &str) {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn lsr_sweep() -> &'static (SweepResult, Duration) {
    static CELL: OnceLock<(SweepResult, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = ScenarioConfig::default();
        let start = Instant::now();
        let result = run_sweep(&base, &base.sweep);
        (result, start.elapsed())
    })
}

fn variants() -> Vec<(Protocol, Option<RoutingClass>)> {
    let mut v = vec![(Protocol::Rpl, None), (Protocol::OppRpl, None)];
    v.extend(CLASSES.iter().map(|&c| (Protocol::CoopRpl, Some(c))));
    v
}

fn label(p: Protocol, c: Option<RoutingClass>) -> String {
    match c {
        Some(c) => format!("{p}/{c}"),
        None => p.to_string(),
    }
}

fn series(r: &SweepResult, p: Protocol, c: Option<RoutingClass>, f: fn(&Aggregate) -> Option<f64>) -> Vec<f64> {
    r.series(p, c, f).into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()
}

fn pdr(a: &Aggregate) -> Option<f64> {
    a.pdr.map(|s| s.mean)
}

fn retx(a: &Aggregate) -> Option<f64> {
    a.mean_retx.map(|s| s.mean)
}

fn delay(a: &Aggregate) -> Option<f64> {
    a.mean_delay_slots.map(|s| s.mean)
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn c1_pdr_rises_with_link_success() {
    let (r, elapsed) = lsr_sweep();
    assert_eq!(r.failed(), 0);
    let mut ok = true;
    for (p, c) in variants() {
        let s = series(r, p, c, pdr);
        let rising = s.windows(2).all(|w| w[1] > w[0]);
        ok &= rising;
        println!("  {:<22} pdr {}{}", label(p, c), fmt(&s), if rising { "" } else { "  (not increasing)" });
    }
    let rpl = series(r, Protocol::Rpl, None, pdr);
    let be = series(r, Protocol::CoopRpl, BE, pdr);
    let dominates = be.iter().zip(&rpl).all(|(b, r)| b >= r);
    let fast = *elapsed < Duration::from_secs(120);
    let pass = ok && dominates && fast;
    report(
        "1",
        pass,
        &format!("(strictly increasing: {ok}, best-effort >= rpl: {dominates}, sweep time {:.1}s)", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn c2_best_effort_pdr_gain() {
    let (r, _) = lsr_sweep();
    let rpl = series(r, Protocol::Rpl, None, pdr);
    let opp = series(r, Protocol::OppRpl, None, pdr);
    let be = series(r, Protocol::CoopRpl, BE, pdr);
    let vs_rpl = be.iter().zip(&rpl).map(|(b, r)| 100.0 * (b - r)).fold(f64::NEG_INFINITY, f64::max);
    let vs_opp_low = 100.0 * (be[0] - opp[0]);
    let pass = (10.0..=30.0).contains(&vs_rpl) && (3.0..=20.0).contains(&vs_opp_low);
    report(
        "2",
        pass,
        &format!("(max gain vs rpl {vs_rpl:.2} pts, want [10, 30]; gain vs opp-rpl at lowest lsr {vs_opp_low:.2} pts, want [3, 20])"),
    );
    assert!(pass);
}

#[test]
fn c3_best_effort_delay_reduction() {
    let (r, _) = lsr_sweep();
    let rpl = series(r, Protocol::Rpl, None, delay);
    let be = series(r, Protocol::CoopRpl, BE, delay);
    let reductions: Vec<f64> = be.iter().zip(&rpl).map(|(b, r)| 100.0 * (r - b) / r).collect();
    let best = reductions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pass = (5.0..=30.0).contains(&best);
    report("3", pass, &format!("(delay reduction per point % [{}], max {best:.2}%, want [5, 30])", fmt(&reductions)));
    assert!(pass);
}

#[test]
fn c4_retransmissions_fall_and_class_a_lowest() {
    let (r, _) = lsr_sweep();
    let mut falling = true;
    for (p, c) in variants() {
        let s = series(r, p, c, retx);
        let ok = s.windows(2).all(|w| w[1] < w[0]);
        falling &= ok;
        println!("  {:<22} retx {}{}", label(p, c), fmt(&s), if ok { "" } else { "  (not decreasing)" });
    }
    let per_class: Vec<Vec<f64>> = CLASSES.iter().map(|&c| series(r, Protocol::CoopRpl, Some(c), retx)).collect();
    let mut a_min = true;
    for k in 0..per_class[0].len() {
        let a = per_class[0][k];
        let lowest = per_class.iter().map(|s| s[k]).fold(f64::INFINITY, f64::min);
        if a > lowest {
            a_min = false;
            let (idx, _) = per_class.iter().enumerate().min_by(|x, y| x.1[k].total_cmp(&y.1[k])).unwrap();
            println!("  point {k}: class-a {a:.4} above {} {lowest:.4}", CLASSES[idx]);
        }
    }
    let pass = falling && a_min;
    report("4", pass, &format!("(strictly decreasing: {falling}, class-a minimum at every point: {a_min})"));
    assert!(pass);
}

#[test]
fn c5_pdr_non_decreasing_in_density() {
    let base = ScenarioConfig::default();
    let spec = SweepSpec { axis: SweepAxis::DensityRatio, values: DEFAULT_DENSITY_VALUES.to_vec(), ..base.sweep.clone() };
    let r = run_sweep(&base, &spec);
    assert_eq!(r.failed(), 0);
    let mut ok = true;
    for (p, c) in variants() {
        let s = series(&r, p, c, pdr);
        let up = s.windows(2).all(|w| w[1] >= w[0]);
        ok &= up;
        println!("  {:<22} pdr {}{}", label(p, c), fmt(&s), if up { "" } else { "  (decreases)" });
    }
    report("5", ok, &format!("(density ratios {:?})", spec.values));
    assert!(ok);
}

// criterion 6: exact properties

#[test]
fn c6a_etx_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6001);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let attempts: u64 = rng.random_range(0..10_000);
        let successes: u64 = rng.random_range(0..=attempts);
        let got = compute_etx(attempts, successes, 16.0).unwrap();
        let want = if successes == 0 { 16.0 } else { attempts as f64 / successes as f64 };
        if got != want {
            mismatches += 1;
        }
    }
    report("6a", mismatches == 0, &format!("(etx oracle, 1000 pairs, {mismatches} mismatches)"));
    assert_eq!(mismatches, 0);
}

/// Recomputes every relay test from the raw network state, independent of
/// the library's class predicates.
fn brute_force_check(sim: &Simulation, class: RoutingClass) -> Result<usize, String> {
    let topo = sim.topology();
    let states = sim.states();
    let mut checked = 0;
    for (i, relay) in sim.tables().relay.iter().enumerate() {
        let Some(r) = *relay else { continue };
        let s = NodeId(i as u32);
        let st = &states[i];
        let d = st.default_parent.ok_or_else(|| format!("{s} has a relay but no parent"))?;
        let rs = &states[r.index()];
        if !topo.are_neighbors(s, r) || !topo.are_neighbors(r, d) || r == d {
            return Err(format!("{s}: relay {r} not a common neighbour of sender and parent {d}"));
        }
        if rs.rank.0 >= st.rank.0 {
            return Err(format!("{s}: relay {r} rank {} not below {}", rs.rank.0, st.rank.0));
        }
        let a = topo.mean_sinr(r, s, &[]) > topo.mean_sinr(d, s, &[]) && topo.mean_sinr(d, r, &[]) > topo.mean_sinr(d, s, &[]);
        let b = rs.active_connections < st.active_connections && rs.children.len() < st.children.len();
        let c = sim.link_etx(s, d) > sim.link_etx(s, r) + sim.link_etx(r, d);
        let admitted = match class {
            RoutingClass::ClassA => a,
            RoutingClass::ClassB => b,
            RoutingClass::ClassC => c,
            RoutingClass::BestEffort => a || b || c,
        };
        if !admitted {
            return Err(format!("{s}: relay {r} fails the {class} test (a {a}, b {b}, c {c})"));
        }
        checked += 1;
    }
    Ok(checked)
}

#[test]
fn c6b_selected_relays_pass_brute_force_eligibility() {
    let mut checked = 0;
    let mut failures = Vec::new();
    for seed in 1..=50u64 {
        for class in CLASSES {
            let config = ScenarioConfig { seed, class, protocol: Protocol::CoopRpl, ..ScenarioConfig::default() };
            let mut sim = Simulation::new(config).unwrap();
            sim.form_dag();
            match brute_force_check(&sim, class) {
                Ok(n) => checked += n,
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
    }
    for f in failures.iter().take(5) {
        println!("  {f}");
    }
    let pass = failures.is_empty() && checked > 0;
    report("6b", pass, &format!("(50 topologies x 4 classes, {checked} selected relays re-checked)"));
    assert!(pass);
}

fn random_candidate(rng: &mut ChaCha8Rng, id: u32) -> CandidateMetrics {
    CandidateMetrics {
        relay: NodeId(id),
        sinr_s_r: rng.random_range(-10.0..70.0),
        sinr_r_d: rng.random_range(-10.0..70.0),
        sinr_s_d: rng.random_range(-10.0..70.0),
        nac_r: rng.random_range(0..120),
        nac_s: rng.random_range(0..120),
        nch_r: rng.random_range(0..20),
        nch_s: rng.random_range(0..20),
        etx_s_r: rng.random_range(1.0..16.0),
        etx_r_d: rng.random_range(1.0..16.0),
        etx_s_d: rng.random_range(1.0..16.0),
    }
}

#[test]
fn c6c_argmax_weight_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6003);
    let scales = RateScales::default();
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..12);
        let cands: Vec<CandidateMetrics> = (0..n).map(|i| random_candidate(&mut rng, i + 1)).collect();
        let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
        let sum: f64 = raw.iter().sum();
        let w = RateWeights { w_sinr: raw[0] / sum, w_traffic: raw[1] / sum, w_nch: raw[2] / sum, w_etx: raw[3] / sum };
        let c = rng.random_range(0.01..100.0);
        if select_relay(&cands, &w, &scales) != select_relay(&cands, &w.scaled(c), &scales) {
            violations += 1;
        }
    }
    report("6c", violations == 0, &format!("(1000 candidate sets, {violations} argmax changes under weight scaling)"));
    assert_eq!(violations, 0);
}

#[test]
fn c6d_formed_dags_acyclic_and_rank_monotone() {
    let mut formed = 0;
    let mut bad = Vec::new();
    for seed in 1..=20u64 {
        for protocol in [Protocol::Rpl, Protocol::OppRpl, Protocol::CoopRpl] {
            for lsr in [0.5, 0.7, 0.9] {
                let mut config = ScenarioConfig { seed, protocol, ..ScenarioConfig::default() };
                config.channel.lsr_value = lsr;
                let mut sim = Simulation::new(config).unwrap();
                sim.form_dag();
                formed += 1;
                let states = sim.states();
                for st in states.iter().filter(|s| !s.id.is_gateway() && s.default_parent.is_some()) {
                    if default_path(states, st.id).is_err() {
                        bad.push(format!("seed {seed} {protocol} lsr {lsr}: loop through {}", st.id));
                    }
                    let p = st.default_parent.unwrap();
                    if states[p.index()].rank.0 >= st.rank.0 {
                        bad.push(format!("seed {seed} {protocol} lsr {lsr}: {} rank not above parent {p}", st.id));
                    }
                }
            }
        }
    }
    for b in bad.iter().take(5) {
        println!("  {b}");
    }
    report("6d", bad.is_empty(), &format!("({formed} formed DAGs, {} violations)", bad.len()));
    assert!(bad.is_empty());
}

/// Exact delivery probability of a hop machine when every link succeeds
/// independently with probability `p`, by walking every outcome branch.
fn delivery_probability(machine: &HopMachine, p: f64) -> (f64, f64) {
    fn walk(machine: &HopMachine, script: &mut Vec<bool>, p: f64, acc: &mut (f64, f64)) {
        let mut m = machine.clone();
        let mut pos = 0;
        let mut exhausted = false;
        let outcome: Option<HopOutcome> = loop {
            let mut trial = |_: NodeId, _: NodeId, _: u32| {
                let r = script.get(pos).copied();
                pos += 1;
                r.unwrap_or_else(|| {
                    exhausted = true;
                    false
                })
            };
            let out = m.step(&mut trial);
            if exhausted {
                break None;
            }
            if out.is_some() {
                break out;
            }
        };
        match outcome {
            Some(out) => {
                let prob: f64 = script.iter().map(|&ok| if ok { p } else { 1.0 - p }).product();
                acc.1 += prob;
                if out.delivered {
                    acc.0 += prob;
                }
            }
            None => {
                for bit in [true, false] {
                    script.push(bit);
                    walk(machine, script, p, acc);
                    script.pop();
                }
            }
        }
    }
    let mut acc = (0.0, 0.0);
    walk(machine, &mut Vec::new(), p, &mut acc);
    acc
}

#[test]
fn c6e_cooperative_hop_dominates_direct() {
    let (s, d, r) = (NodeId(1), NodeId(0), NodeId(2));
    let mut worst_margin = f64::INFINITY;
    let mut ok = true;
    for max_retx in 0..=3u32 {
        for k in 1..=9 {
            let p = k as f64 / 10.0;
            let (direct, total_d) = delivery_probability(&HopMachine::direct(s, d, max_retx), p);
            let (coop, total_c) =
                delivery_probability(&HopMachine::cooperative(s, d, Some(r), max_retx, 1), p);
            let closed = 1.0 - (1.0 - p).powi(max_retx as i32 + 1);
            let exact = (total_d - 1.0).abs() < 1e-12 && (total_c - 1.0).abs() < 1e-12 && (direct - closed).abs() < 1e-12;
            worst_margin = worst_margin.min(coop - direct);
            if !exact || coop <= direct {
                ok = false;
                println!("  max_retx {max_retx} p {p}: direct {direct:.6} coop {coop:.6}");
            }
        }
    }
    report("6e", ok, &format!("(p 0.1..0.9, max_retx 0..3, smallest coop margin {worst_margin:.6})"));
    assert!(ok);
}

#[test]
fn c6f_packet_conservation() {
    let (r, _) = lsr_sweep();
    let mut runs = 0;
    let mut bad = 0;
    for point in &r.points {
        let m = point.outcome.as_ref().unwrap();
        runs += 1;
        if m.sent != m.delivered + m.dropped {
            bad += 1;
        }
    }
    report("6f", bad == 0, &format!("({runs} runs, {bad} with sent != delivered + dropped)"));
    assert_eq!(bad, 0);
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn c6g_golden_csv_replay() {
    let config = parse_scenario(&data("golden.toml")).unwrap();
    let golden = std::fs::read_to_string(data("golden.csv")).unwrap();
    let first = run_sweep(&config, &config.sweep).to_csv_string();
    let second = run_sweep(&config, &config.sweep).to_csv_string();
    let pass = first == golden && second == golden;
    if first != golden {
        for (k, (a, b)) in first.lines().zip(golden.lines()).enumerate() {
            if a != b {
                println!("  line {}: got {a}\n  line {}: want {b}", k + 1, k + 1);
                break;
            }
        }
    }
    report("6g", pass, &format!("({} rows replayed bit for bit)", golden.lines().count() - 1));
    assert!(pass);
}
