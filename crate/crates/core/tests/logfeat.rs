use simtune::logfeat::*;
use simtune::simkernel::cases::reference_case;
use simtune::simkernel::*;

fn short_case() -> SimulationCase {
    let mut case = reference_case();
    case.horizon_days = 30.0;
    for w in case.wells.iter_mut() {
        w.schedule[0].end_day = 30.0;
    }
    case
}

fn crafted_log(newton: u64, ts: u64, li: u64, elapsed: f64) -> LogDocument {
    let mut log = LogDocument::default();
    for key in MANDATORY_KEYS {
        let v = match key {
            "SIMULATOR_ID" => SIMULATOR_ID.to_string(),
            "END_STATUS" => "NORMAL".to_string(),
            "NEWTON_CYCLES" => newton.to_string(),
            "TIMESTEPS" => ts.to_string(),
            "LINEAR_ITERS" => li.to_string(),
            "ELAPSED_S" => elapsed.to_string(),
            _ => "0".to_string(),
        };
        log.push(key, v);
    }
    log
}

fn flat_curves() -> Curves {
    let mut c = Curves::with_names(["FIELD_OPT", "FIELD_WPT", "FIELD_WIT"]);
    c.push_row(0.0, &[0.0, 0.0, 0.0]);
    c.push_row(10.0, &[5.0, 1.0, 6.0]);
    c
}

#[test]
fn emit_parse_emit_is_byte_identical() {
    let case = short_case();
    let r = run_simulation(&case, f64::INFINITY).unwrap();
    let text = emit_log(&r, &case).to_text();
    assert!(text.contains("END_STATUS=NORMAL\n"));
    let parsed = parse_log(&text).unwrap();
    assert_eq!(parsed.to_text(), text);
}

#[test]
fn features_from_saved_artifacts_equal_direct_features() {
    let case = short_case();
    let r = run_simulation(&case, f64::INFINITY).unwrap();
    let log = parse_log(&emit_log(&r, &case).to_text()).unwrap();
    let curves = Curves::from_csv(&r.curves.to_csv()).unwrap();
    let from_log = extract_features(&log, &case, &curves).unwrap();
    let direct = features_from_result(&r, &case).unwrap();
    assert_eq!(from_log, direct);
    assert_eq!(from_log.flatten(), direct.flatten());
    assert_eq!(direct.doms, 1);
    assert_eq!(direct.simulator_id, SIMULATOR_ID);
}

#[test]
fn timeout_log_carries_partial_counters() {
    let case = short_case();
    let full = run_simulation(&case, f64::INFINITY).unwrap();
    let r = run_simulation(&case, full.elapsed_s / 2.0).unwrap();
    let log = parse_log(&emit_log(&r, &case).to_text()).unwrap();
    assert_eq!(log.get("END_STATUS"), Some("TIMEOUT"));
    let ts: u64 = log.value("TIMESTEPS").unwrap();
    assert!(ts < full.counters.timesteps);
    let fv = extract_features(&log, &case, &r.curves).unwrap();
    assert_eq!(fv.end_status, SimStatus::Timeout);
    assert_eq!(fv.flatten().len(), FeatureVector::LEN);
}

#[test]
fn crafted_log_gives_per_timestep_ratios() {
    let case = short_case();
    let fv = extract_features(&crafted_log(100, 50, 150, 10.0), &case, &flat_curves()).unwrap();
    assert_eq!(fv.et_per_timestep, 0.2);
    let (ni_ts, li_ni) = derived_metrics(&fv).unwrap();
    assert_eq!(ni_ts, 2.0);
    assert_eq!(li_ni, 1.5);
}

#[test]
fn iteration_ratios_of_a_tabulated_run() {
    let case = short_case();
    let fv = extract_features(&crafted_log(143, 100, 4174, 1.0), &case, &flat_curves()).unwrap();
    let (ni_ts, li_ni) = derived_metrics(&fv).unwrap();
    assert!((ni_ts - 1.43).abs() < 1e-12);
    assert!((li_ni - 29.19).abs() < 0.005);
}

#[test]
fn unit_ratios() {
    let case = short_case();
    let fv = extract_features(&crafted_log(7, 7, 7, 1.0), &case, &flat_curves()).unwrap();
    assert_eq!(derived_metrics(&fv).unwrap(), (1.0, 1.0));
}

#[test]
fn zero_timesteps_rejected() {
    let case = short_case();
    let err = extract_features(&crafted_log(0, 0, 0, 1.0), &case, &flat_curves()).unwrap_err();
    assert_eq!(err, LogError::ZeroTimesteps);
}

#[test]
fn uniform_porosity_has_zero_spread() {
    let mut case = short_case();
    case.grid.porosity.iter_mut().for_each(|p| *p = 0.2);
    let fv = extract_features(&crafted_log(1, 1, 1, 1.0), &case, &flat_curves()).unwrap();
    let s = &fv.poro_stats;
    assert_eq!((s.min, s.max, s.mean, s.std), (0.2, 0.2, 0.2, 0.0));
}

#[test]
fn inactive_cells_excluded_from_map_statistics() {
    let mut case = short_case();
    case.grid.active[5] = false;
    case.grid.perm_x[5] = 1e6;
    let fv = extract_features(&crafted_log(1, 1, 1, 1.0), &case, &flat_curves()).unwrap();
    assert!(fv.perm_x_stats.max < 1e6);
    assert_eq!(fv.active_blocks + 1, fv.total_blocks);
}

#[test]
fn schema_length_constant_across_cases() {
    let a = short_case();
    let mut b = short_case();
    b.wells.truncate(1);
    let fa = extract_features(&crafted_log(1, 1, 1, 1.0), &a, &flat_curves()).unwrap();
    let fb = extract_features(&crafted_log(1, 1, 1, 1.0), &b, &flat_curves()).unwrap();
    assert_eq!(fa.flatten().len(), fb.flatten().len());
}
