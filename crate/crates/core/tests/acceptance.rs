//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use bayguard::fabric::pcap::PcapRecord;
use bayguard::merging_unit::MuConfig;
use bayguard::relay::TripPath;
use bayguard::scenario::{self, Mode, RunResult, ScenarioConfig};
use bayguard::sv_codec;
use bayguard::{AttackSpec, FaultSpec, MergingUnit, PtpAttackMode, RelayEventKind, SystemParams};
use common::{
    arb_frame, malformed_variants, raw_counts, raw_smp_cnt, raw_smp_synch, raw_sv_id, FRAME_PERIOD_US,
    LINK_LATENCY_US,
};
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn load(name: &str) -> ScenarioConfig {
    scenario::bundled(name).expect("bundled config")
}

fn timed(cfg: &ScenarioConfig) -> (RunResult, Duration) {
    let started = Instant::now();
    let result = scenario::run(cfg).expect("bundled configs validate");
    (result, started.elapsed())
}

fn count(result: &RunResult, kind: RelayEventKind) -> usize {
    result.relay_events.iter().filter(|e| e.kind == kind).count()
}

fn first(result: &RunResult, kind: RelayEventKind) -> Option<u64> {
    result.relay_events.iter().find(|e| e.kind == kind).map(|e| e.t)
}

fn onset_us(cfg: &ScenarioConfig) -> u64 {
    (cfg.fault_onset().expect("config has a fault") * 1e6).round() as u64
}

fn ms(us: u64) -> f64 {
    us as f64 / 1e3
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn force_action() -> Outcome {
    let limit = Duration::from_secs(5);
    let (base, t_base) = timed(&load("scenario1_baseline"));
    let (res, t_res) = timed(&load("scenario1_resilience"));
    let trips = count(&base, RelayEventKind::Trip);
    ensure(trips == 1, format!("baseline produced {trips} TRIP events"))?;
    let start = base.probes.attack_start.ok_or("attack never started")?;
    let trip = first(&base, RelayEventKind::Trip).unwrap();
    let latency = trip.checked_sub(start).ok_or("trip before attack onset")?;
    ensure(latency <= 60_000, format!("baseline trip {} ms after onset", ms(latency)))?;
    let res_trips = count(&res, RelayEventKind::Trip);
    ensure(res_trips == 0, format!("resilience produced {res_trips} TRIP events"))?;
    let slowest = t_base.max(t_res);
    ensure(slowest < limit, format!("run took {:.2} s", slowest.as_secs_f64()))?;
    Ok(format!(
        "baseline 1 TRIP {:.3} ms after onset, resilience 0 TRIP, slowest run {:.3} s",
        ms(latency),
        slowest.as_secs_f64()
    ))
}

fn masquerade() -> Outcome {
    let cfg = load("scenario2_baseline");
    let (base, _) = timed(&cfg);
    let onset = onset_us(&cfg);
    let sustained = cfg.duration_us() - onset;
    ensure(base.probes.fault_cleared_at.is_none(), "baseline fault was cleared")?;
    ensure(sustained >= 1_000_000, format!("fault sustained only {} ms", ms(sustained)))?;
    let trips = count(&base, RelayEventKind::Trip);
    ensure(trips == 0, format!("baseline produced {trips} TRIP events"))?;
    let cfg_r = load("scenario2_resilience");
    let (res, _) = timed(&cfg_r);
    let allowed = 60_000 + cfg_r.relay.teleprotection.delay_us;
    let trip = first(&res, RelayEventKind::Trip).ok_or("resilience never tripped")?;
    let latency = trip.checked_sub(onset_us(&cfg_r)).ok_or("resilience tripped before the fault")?;
    ensure(latency <= allowed, format!("resilience trip {} ms after fault", ms(latency)))?;
    Ok(format!(
        "baseline 0 TRIP over {} ms of fault, resilience TRIP {:.3} ms after onset (limit {} ms)",
        ms(sustained),
        ms(latency),
        ms(allowed)
    ))
}

/// Arrival time of the first frame whose svID and smpCnt repeat a frame seen
/// in the previous half second with a different payload.
fn first_conflict(capture: &[PcapRecord]) -> Option<u64> {
    let mut seen: Vec<(u64, Vec<u8>, u16, Vec<u8>)> = Vec::new();
    for r in capture {
        let (id, cnt, body) = (raw_sv_id(&r.data).to_vec(), raw_smp_cnt(&r.data), raw_counts(&r.data));
        let body: Vec<u8> = body.iter().flat_map(|c| c.to_be_bytes()).collect();
        seen.retain(|(t, ..)| r.timestamp_us - t < 500_000);
        if seen.iter().any(|(_, i, c, b)| *i == id && *c == cnt && *b != body) {
            return Some(r.timestamp_us);
        }
        seen.push((r.timestamp_us, id, cnt, body));
    }
    None
}

fn parallel_replay() -> Outcome {
    let cfg = load("scenario3_baseline");
    let (base, _) = timed(&cfg);
    let conflict = first_conflict(&base.capture).ok_or("no conflicting frame reached the relay")?;
    let block = base
        .relay_events
        .iter()
        .find(|e| e.kind == RelayEventKind::Block && e.t >= conflict)
        .map(|e| e.t)
        .ok_or("relay never blocked")?;
    ensure(block - conflict <= 500, format!("BLOCK {} µs after first conflict", block - conflict))?;
    let onset = onset_us(&cfg);
    let state_at_onset = base
        .relay_events
        .iter()
        .rev()
        .find(|e| e.t <= onset && matches!(e.kind, RelayEventKind::Block | RelayEventKind::Unblock))
        .map(|e| e.kind);
    ensure(state_at_onset == Some(RelayEventKind::Block), "relay not blocked when the fault began")?;
    let trips = count(&base, RelayEventKind::Trip);
    ensure(trips == 0, format!("baseline produced {trips} TRIP events"))?;
    let (res, _) = timed(&load("scenario3_resilience"));
    let trip = res.trip.ok_or("resilience never tripped")?;
    ensure(trip.path == TripPath::Teleprotection, format!("resilience trip via {:?}", trip.path))?;
    ensure(trip.mu_binary, "resilience trip without MU binary")?;
    Ok(format!(
        "BLOCK {} µs after first conflict, baseline 0 TRIP, resilience TRIP at {:.6} s via teleprotection with MU binary",
        block - conflict,
        trip.t as f64 / 1e6
    ))
}

fn throttle_only(mode: Mode) -> ScenarioConfig {
    let mut cfg = load("scenario4_baseline").with_mode(mode);
    cfg.name = format!("scenario4_throttle_{mode}");
    match &mut cfg.attack {
        AttackSpec::Ptp { params, .. } => params.mode = PtpAttackMode::Throttle,
        other => panic!("scenario 4 attack is {}", other.name()),
    }
    cfg
}

fn ptp_attack() -> Outcome {
    let cfg = throttle_only(Mode::Baseline);
    let (base, _) = timed(&cfg);
    let timeout = u64::from(cfg.ptp.timeout_multiplier) * (cfg.ptp.grandmaster.sync_interval * 1e6).round() as u64;
    let idx = base
        .capture
        .iter()
        .position(|r| raw_smp_synch(&r.data) != 2)
        .ok_or("smpSynch never left GLOBAL")?;
    let none = &base.capture[idx];
    ensure(raw_smp_synch(&none.data) == 0, "smpSynch left GLOBAL for a value other than NONE")?;
    ensure(idx > 0 && raw_smp_synch(&base.capture[idx - 1].data) == 2, "no GLOBAL frame before NONE")?;
    let emitted = none.timestamp_us - LINK_LATENCY_US;
    let last_sync = base.probes.last_gm_sync_at_mu.ok_or("MU never received a GM sync")?;
    let loss = emitted - last_sync;
    ensure(
        loss <= timeout + FRAME_PERIOD_US,
        format!("NONE {loss} µs after last sync, limit {}", timeout + FRAME_PERIOD_US),
    )?;
    let blocked = base
        .relay_events
        .iter()
        .any(|e| e.kind == RelayEventKind::Block && e.t >= none.timestamp_us);
    ensure(blocked, "relay did not block after NONE")?;
    let cfg_r = throttle_only(Mode::Resilience);
    let (res, _) = timed(&cfg_r);
    let trip = first(&res, RelayEventKind::Trip).ok_or("resilience never tripped")?;
    ensure(trip >= onset_us(&cfg_r), "resilience tripped before the real fault")?;
    for name in ["scenario4_baseline", "scenario4_resilience"] {
        let report = scenario::evaluate(&timed(&load(name)).0);
        ensure(report.passed, format!("{name} expectations failed"))?;
    }
    Ok(format!(
        "GLOBAL->NONE {:.3} ms after last GM sync (limit {:.3} ms), relay BLOCKs, resilience TRIP at {:.6} s",
        ms(loss),
        ms(timeout + FRAME_PERIOD_US),
        trip as f64 / 1e6
    ))
}

fn peaks(frames: &[&PcapRecord]) -> ([f64; 3], [f64; 3]) {
    let mut i = [0.0f64; 3];
    let mut v = [0.0f64; 3];
    for r in frames {
        let c = raw_counts(&r.data);
        for p in 0..3 {
            i[p] = i[p].max((c[p] as f64 * 0.001).abs());
            v[p] = v[p].max((c[4 + p] as f64 * 0.01).abs());
        }
    }
    (i, v)
}

fn within(x: f64, target: f64) -> bool {
    (x - target).abs() <= 0.02 * target
}

fn numeric_fidelity() -> Outcome {
    let cfg = load("scenario1_baseline");
    let (base, _) = timed(&cfg);
    let start = base.probes.attack_start.ok_or("attack never started")?;
    let ramp = match &cfg.attack {
        AttackSpec::Force { params, .. } => u64::from(params.ramp),
        _ => return Err("scenario 1 is not a force attack".into()),
    };
    let emitted = |r: &PcapRecord| r.timestamp_us - LINK_LATENCY_US;
    let nominal: Vec<_> = base.capture.iter().filter(|r| emitted(r) < start).collect();
    let forced: Vec<_> = base
        .capture
        .iter()
        .filter(|r| emitted(r) >= start + ramp * FRAME_PERIOD_US)
        .collect();
    let (ni, nv) = peaks(&nominal);
    let (fi, fv) = peaks(&forced);
    for p in 0..3 {
        ensure(within(ni[p], 0.370), format!("nominal current peak {} A", ni[p]))?;
        ensure(within(nv[p], 83.0), format!("nominal voltage peak {} V", nv[p]))?;
        ensure(within(fi[p], 22.0), format!("fault current peak {} A", fi[p]))?;
        ensure(within(fv[p], 5.0), format!("fault voltage peak {} V", fv[p]))?;
    }
    Ok(format!(
        "fault peaks {:.3}/{:.3}/{:.3} A and {:.2}/{:.2}/{:.2} V, nominal {:.3} A and {:.2} V",
        fi[0], fi[1], fi[2], fv[0], fv[1], fv[2], ni[0], nv[0]
    ))
}

fn shape(capture: &[PcapRecord]) -> (Vec<usize>, Vec<u16>, Vec<u64>) {
    (
        capture.iter().map(|r| r.data.len()).collect(),
        capture.iter().map(|r| raw_smp_cnt(&r.data)).collect(),
        capture.iter().map(|r| r.timestamp_us).collect(),
    )
}

fn stealth() -> Outcome {
    let mut compared = 0;
    for name in ["scenario1_baseline", "scenario1_resilience", "scenario2_baseline", "scenario2_resilience"] {
        let cfg = load(name);
        let mut clean = cfg.clone();
        clean.attack = AttackSpec::None;
        let (attacked, _) = timed(&cfg);
        let (plain, _) = timed(&clean);
        ensure(
            attacked.capture.len() == plain.capture.len(),
            format!("{name}: {} frames vs {}", attacked.capture.len(), plain.capture.len()),
        )?;
        let (a, p) = (shape(&attacked.capture), shape(&plain.capture));
        ensure(a.0 == p.0, format!("{name}: frame lengths differ"))?;
        ensure(a.1 == p.1, format!("{name}: smp_cnt sequence differs"))?;
        ensure(a.2 == p.2, format!("{name}: arrival times differ"))?;
        ensure(
            a.2.windows(2).all(|w| w[1] - w[0] == FRAME_PERIOD_US),
            format!("{name}: inter-arrival is not {FRAME_PERIOD_US} µs"),
        )?;
        let modified = attacked.capture.iter().zip(&plain.capture).filter(|(x, y)| x.data != y.data).count();
        ensure(modified > 0, format!("{name}: attack changed no frames"))?;
        compared += attacked.capture.len();
    }
    Ok(format!("{compared} frames over 4 runs match the unattacked runs in count, length, smp_cnt and timing"))
}

fn codec_suite() -> Outcome {
    let mut runner = runner(10_000);
    let rejected = std::cell::Cell::new(0usize);
    let classes = std::cell::RefCell::new(std::collections::BTreeSet::new());
    let result = runner.run(&arb_frame(), |frame| {
        let bytes = sv_codec::encode(&frame).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let back = sv_codec::decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
        if back != frame {
            return Err(TestCaseError::fail("decoded frame differs"));
        }
        for (class, bad) in malformed_variants(&bytes, frame.asdu.sv_id.len()) {
            if sv_codec::decode(&bad).is_ok() {
                return Err(TestCaseError::fail(format!("{class} accepted")));
            }
            classes.borrow_mut().insert(class);
            rejected.set(rejected.get() + 1);
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok(format!(
        "10000 random frames round-trip, {} malformed inputs across {} classes rejected",
        rejected.get(),
        classes.borrow().len()
    ))
}

fn wraps_per_second(cnts: &[u16]) -> Result<usize, String> {
    // prefix[k] counts wraps between frames 0..=k.
    let mut prefix = vec![0usize; cnts.len()];
    for k in 1..cnts.len() {
        prefix[k] = prefix[k - 1] + usize::from(cnts[k] < cnts[k - 1]);
    }
    let mut windows = 0;
    for s in 0..cnts.len().saturating_sub(4000) {
        let wraps = prefix[s + 4000] - prefix[s];
        ensure(wraps == 1, format!("{wraps} wraps in the second starting at frame {s}"))?;
        let mut seen = vec![false; 4000];
        if s % 997 == 0 {
            for &c in &cnts[s..s + 4000] {
                seen[c as usize] = true;
            }
            ensure(seen.iter().all(|x| *x), format!("second at frame {s} misses a count"))?;
        }
        windows += 1;
    }
    Ok(windows)
}

fn counter() -> Outcome {
    let mut cfg = load("reference_nominal");
    cfg.duration = 3.0;
    let (result, _) = timed(&cfg);
    let cnts: Vec<u16> = result.capture.iter().map(|r| raw_smp_cnt(&r.data)).collect();
    let fabric_windows = wraps_per_second(&cnts)?;
    let mut runner = runner(64);
    runner
        .run(&(0u64..8000), |offset| {
            let mut mu = MergingUnit::new(MuConfig::default(), SystemParams::default(), FaultSpec::none(), None, 1)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let cnts: Vec<u16> = (0..offset + 4001)
                .map(|k| mu.tick(k * FRAME_PERIOD_US).frame.asdu.smp_cnt)
                .collect();
            wraps_per_second(&cnts[offset as usize..]).map_err(TestCaseError::fail)?;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{fabric_windows} one-second windows at the relay and 64 random MU offsets each wrap exactly once"
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (name, _) in scenario::BUNDLED.iter().chain(scenario::REFERENCE) {
        let cfg = load(name);
        let (a, b) = (dir.path().join(format!("{name}_a")), dir.path().join(format!("{name}_b")));
        scenario::run_to_dir(&cfg, &a).map_err(|e| e.to_string())?;
        scenario::run_to_dir(&cfg, &b).map_err(|e| e.to_string())?;
        let read = |d: &std::path::Path| std::fs::read(d.join("events.jsonl")).map_err(|e| e.to_string());
        let (ea, eb) = (read(&a)?, read(&b)?);
        ensure(!ea.is_empty(), format!("{name}: empty event log"))?;
        ensure(ea == eb, format!("{name}: event logs differ"))?;
        checked += 1;
    }
    Ok(format!("{checked} configs produce byte-identical event logs across two runs"))
}

fn no_attack_equivalence() -> Outcome {
    let mut lines = Vec::new();
    for (name, _) in scenario::REFERENCE {
        let cfg = load(name);
        let delay = cfg.relay.teleprotection.delay_us;
        let (b, _) = timed(&cfg.clone().with_mode(Mode::Baseline));
        let (r, _) = timed(&cfg.with_mode(Mode::Resilience));
        let (tb, tr) = (first(&b, RelayEventKind::Trip), first(&r, RelayEventKind::Trip));
        ensure(tb.is_some() == tr.is_some(), format!("{name}: modes disagree on tripping"))?;
        match tb.zip(tr) {
            Some((x, y)) => {
                let diff = x.abs_diff(y);
                ensure(diff <= delay, format!("{name}: trip times differ by {} ms", ms(diff)))?;
                lines.push(format!("{name} Δ{} ms", ms(diff)));
            }
            None => lines.push(format!("{name} no trip")),
        }
    }
    Ok(lines.join(", "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("force_action", force_action),
        ("masquerade", masquerade),
        ("parallel_replay", parallel_replay),
        ("ptp_attack", ptp_attack),
        ("numeric_fidelity", numeric_fidelity),
        ("stealth", stealth),
        ("codec_suite", codec_suite),
        ("counter_wrap", counter),
        ("determinism", determinism),
        ("no_attack_equivalence", no_attack_equivalence),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
