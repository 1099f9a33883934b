use proptest::prelude::*;
use simtune::esmda::AssimilationConfig;
use simtune::logfeat::FeatureVector;
use simtune::oracle::OracleError;
use simtune::searchspace::{builtin_space, encode, lhs_sample, validate, ConfigSample, ParamValue, SearchSpace};
use simtune::simkernel::SimStatus;
use simtune::workflow::*;

fn small_spec(seed: u64, n_r: usize) -> EnsembleSpec {
    EnsembleSpec {
        seed,
        n_r,
        nx: 6,
        ny: 6,
        horizon_days: 60.0,
        report_interval_days: 20.0,
        injection_rate: 20.0,
        ..Default::default()
    }
}

fn small_config(workers: usize) -> WorkflowConfig {
    WorkflowConfig { query_size: 200, seed: 5, workers, ..Default::default() }
}

fn features() -> FeatureVector {
    let spec = small_spec(3, 2);
    let p = generate_problem(&spec).unwrap();
    let case = &p.prior_cases()[0];
    let r = simtune::simkernel::run_simulation(case, f64::INFINITY).unwrap();
    simtune::logfeat::features_from_result(&r, case).unwrap()
}

/// Prediction rule evaluated on the encoded configuration.
struct Rule<F: Fn(&ConfigSample, &[f64]) -> (f64, f64)> {
    space: SearchSpace,
    f: F,
}

impl<F: Fn(&ConfigSample, &[f64]) -> (f64, f64)> PerformanceModel for Rule<F> {
    fn predict_batch(&self, _: &FeatureVector, samples: &[ConfigSample]) -> Result<Vec<(f64, f64)>, OracleError> {
        samples.iter().map(|s| Ok((self.f)(s, &encode(s, &self.space)?))).collect()
    }
}

#[test]
fn wet_branches_and_boundaries() {
    assert_eq!(weighted_elapsed_time(100.0, 0.03), 100.0);
    assert_eq!(weighted_elapsed_time(100.0, 0.07), 200.0);
    assert_eq!(weighted_elapsed_time(100.0, 0.20), 100000.0);
    assert_eq!(weighted_elapsed_time(100.0, 0.05), 100.0);
    assert_eq!(weighted_elapsed_time(100.0, 0.10), 200.0);
    assert_eq!(weighted_elapsed_time(100.0, 0.0), 100.0);
}

#[test]
fn wet_policy_rejects_unordered_thresholds() {
    let bad = WetPolicy { t1: 0.1, t2: 0.1, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = WetPolicy { t1: 0.0, ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(WetPolicy::default().validate().is_ok());
}

#[test]
fn constant_oracle_picks_first_candidate() {
    let space = builtin_space();
    let m = Rule { space: space.clone(), f: |_: &ConfigSample, _: &[f64]| (3.0, 0.01) };
    let q = query_oracle(&m, &features(), &space, 50, 9, &WetPolicy::default()).unwrap();
    assert_eq!(q.best_index, 0);
    assert_eq!(q.best.sample, lhs_sample(&space, 50, 9).unwrap()[0]);
    assert_eq!(q.band_counts, [50, 0, 0]);
}

#[test]
fn single_candidate_query() {
    let space = builtin_space();
    let m = Rule { space: space.clone(), f: |_: &ConfigSample, x: &[f64]| (1.0 + x[0], 0.2) };
    let q = query_oracle(&m, &features(), &space, 1, 4, &WetPolicy::default()).unwrap();
    assert_eq!(q.candidates, 1);
    assert_eq!(q.best.sample, lhs_sample(&space, 1, 4).unwrap()[0]);
    assert_eq!(q.best.wet, q.best.elapsed_s * 1000.0);
}

#[test]
fn penalized_category_never_chosen() {
    let space = builtin_space();
    let rule = |s: &ConfigSample, x: &[f64]| {
        let et = 1.0 + x.iter().sum::<f64>() / x.len() as f64;
        let slow = s.get("formulation") == Some(&ParamValue::Cat("impes".into()));
        (if slow { 10.0 * et } else { et }, 0.01)
    };
    let m = Rule { space: space.clone(), f: rule };
    let f = features();
    for seed in 0..5 {
        let q = query_oracle(&m, &f, &space, 300, seed, &WetPolicy::default()).unwrap();
        let samples = lhs_sample(&space, 300, seed).unwrap();
        let preds: Vec<(f64, f64)> = samples.iter().map(|s| rule(s, &encode(s, &space).unwrap())).collect();
        let order = rank_candidates(&preds, &WetPolicy::default());
        assert_eq!(order[0], q.best_index);
        for w in order.windows(2) {
            let (a, b) = (WetPolicy::default().wet(preds[w[0]].0, preds[w[0]].1), WetPolicy::default().wet(preds[w[1]].0, preds[w[1]].1));
            assert!(a <= b);
        }
        assert_ne!(q.best.sample.get("formulation"), Some(&ParamValue::Cat("impes".into())));
        assert!(validate(&q.best.sample, &space).is_ok());
    }
}

#[test]
fn ties_prefer_lower_quality_then_index() {
    let preds = [(1.0, 0.04), (1.0, 0.02), (1.0, 0.02), (0.5, 0.08)];
    assert_eq!(rank_candidates(&preds, &WetPolicy::default()), vec![1, 2, 0, 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn ranking_invariant_to_elapsed_scaling(
        preds in prop::collection::vec((0.01f64..100.0, 0.0f64..0.2), 1..60),
        c in 0.01f64..100.0,
    ) {
        let policy = WetPolicy::default();
        let scaled: Vec<(f64, f64)> = preds.iter().map(|&(e, q)| (e * c, q)).collect();
        let a = rank_candidates(&preds, &policy)[0];
        let b = rank_candidates(&scaled, &policy)[0];
        let wa = policy.wet(scaled[a].0, scaled[a].1);
        let wb = policy.wet(scaled[b].0, scaled[b].1);
        // floating-point products may reorder exact ties only
        prop_assert!(a == b || (wa - wb).abs() <= 1e-12 * wa.abs());
    }
}

#[test]
fn derived_seeds_are_distinct_and_stable() {
    let mut seen = std::collections::BTreeSet::new();
    for r in 0..6 {
        for j in 0..50 {
            assert!(seen.insert(derive_seed(42, r, j)));
        }
    }
    assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
    assert_ne!(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
}

#[test]
fn generator_is_seeded_and_shaped() {
    let spec = small_spec(11, 5);
    let a = generate_problem(&spec).unwrap();
    let b = generate_problem(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_problem(&EnsembleSpec { seed: 12, ..spec.clone() }).unwrap();
    assert_ne!(a.prior.m, c.prior.m);
    assert_eq!(a.prior.m.shape(), (36, 5));
    // 2 producers x (oil, water) x 3 reports after day 0
    assert_eq!(a.obs.d_obs.len(), 12);
    assert!(a.obs.variances.iter().all(|&v| v >= spec.noise_floor * spec.noise_floor));
    let member = generate_problem(&EnsembleSpec { truth: TruthSource::Member { index: 2 }, ..spec.clone() }).unwrap();
    assert_eq!(member.truth, member.prior.m.column(2).iter().copied().collect::<Vec<_>>());
    assert!(generate_problem(&EnsembleSpec { truth: TruthSource::Member { index: 5 }, ..spec }).is_err());
}

#[test]
fn field_moments_match_parameters() {
    let spec = EnsembleSpec { seed: 2, n_r: 40, nx: 12, ny: 12, corr_length: 0, log_perm_std: 0.5, ..small_spec(2, 40) };
    let p = generate_problem(&spec).unwrap();
    let v: Vec<f64> = p.prior.m.iter().copied().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // 5760 iid draws: standard errors 0.0066 (mean) and 0.0047 (variance)
    assert!((mean - spec.log_perm_mean).abs() < 4.0 * 0.5 / n.sqrt());
    assert!((var - 0.25).abs() < 4.0 * 0.25 * (2.0 / (n - 1.0)).sqrt());
    let smooth = generate_problem(&EnsembleSpec { corr_length: 2, ..spec.clone() }).unwrap();
    let lag1 = |m: &nalgebra::DMatrix<f64>| {
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for j in 0..m.ncols() {
            for y in 0..12 {
                for x in 0..11 {
                    let a = m[(y * 12 + x, j)] - spec.log_perm_mean;
                    let b = m[(y * 12 + x + 1, j)] - spec.log_perm_mean;
                    acc += a * b;
                    cnt += 1.0;
                }
            }
        }
        acc / cnt / 0.25
    };
    // box of width 5 shifted by one cell shares 4/5 of its support
    assert!((lag1(&smooth.prior.m) - 0.8).abs() < 0.1);
    assert!(lag1(&p.prior.m).abs() < 0.1);
}

#[test]
fn baseline_run_uses_one_configuration() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(21, 3)).unwrap();
    let es = AssimilationConfig::uniform(2, 1);
    let out = baseline_run(&p, &es, &small_config(2), &space).unwrap();
    assert_eq!(out.ledger.simulations(), 9);
    assert_eq!(out.esmda.forward_calls, 3);
    assert_eq!(out.ledger.distinct_samples(), vec![space.defaults()]);
    assert!(out.ledger.entries.iter().all(|e| e.chosen.is_none() && e.status == SimStatus::Normal));
    assert!(out.ledger.refits.is_empty());
    assert!(out.ledger.round(3).iter().all(|e| e.forecast));
    assert_eq!(out.manifest.simulations, 9);
}

#[test]
fn coupled_run_refits_and_tunes() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(22, 4)).unwrap();
    let es = AssimilationConfig::uniform(3, 2);
    let out = coupled_run(&p, &es, &small_config(2), None, &space).unwrap();
    let l = &out.ledger;
    assert_eq!(l.simulations(), 16);
    assert!(l.round(1).iter().all(|e| e.sample == space.defaults() && e.chosen.is_none()));
    for r in 2..=4 {
        for e in l.round(r) {
            let c = e.chosen.as_ref().expect("tuned rounds record the choice");
            assert_eq!(c.sample, e.sample);
            assert!(validate(&e.sample, &space).is_ok());
            assert_eq!(e.reference_features, l.round(r - 1)[e.realization].features);
        }
    }
    let sizes: Vec<usize> = l.refits.iter().map(|r| r.training_rows).collect();
    assert_eq!(sizes, vec![4, 8, 12]);
    assert_eq!(l.refits.iter().map(|r| r.round).collect::<Vec<_>>(), vec![2, 3, 4]);
    // realizations get different candidates
    assert!(l.round(2).iter().any(|e| e.sample != l.round(2)[0].sample));
}

#[test]
fn worker_count_does_not_change_results() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(23, 4)).unwrap();
    let es = AssimilationConfig::uniform(2, 3);
    let a = coupled_run(&p, &es, &small_config(1), None, &space).unwrap();
    let b = coupled_run(&p, &es, &small_config(3), None, &space).unwrap();
    assert_eq!(a.ledger.to_csv(&space), b.ledger.to_csv(&space));
    assert_eq!(a.final_state.m, b.final_state.m);
    let strip = |l: &RunLedger| {
        let mut l = l.clone();
        l.entries.iter_mut().for_each(|e| e.wall_s = 0.0);
        l
    };
    assert_eq!(strip(&a.ledger), strip(&b.ledger));
}

#[test]
fn configuration_errors() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(24, 2)).unwrap();
    let es = AssimilationConfig::uniform(2, 3);
    let cfg = WorkflowConfig { baseline: BaselineMode::Engineer, ..small_config(1) };
    assert!(matches!(baseline_run(&p, &es, &cfg, &space), Err(WorkflowError::Config(_))));
    let cfg = WorkflowConfig { budget: Some(5), ..small_config(1) };
    assert!(matches!(baseline_run(&p, &es, &cfg, &space), Err(WorkflowError::Budget { budget: 5, needed: 6 })));
    let cfg = WorkflowConfig { query_size: 0, ..small_config(1) };
    assert!(matches!(coupled_run(&p, &es, &cfg, None, &space), Err(WorkflowError::Config(_))));
}

#[test]
fn timeout_aborts_with_diagnostics() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(25, 2)).unwrap();
    let es = AssimilationConfig::uniform(2, 3);
    let cfg = WorkflowConfig { first_round_timeout_s: Some(1e-9), ..small_config(1) };
    match baseline_run(&p, &es, &cfg, &space) {
        Err(WorkflowError::Simulation { round: 1, status: SimStatus::Timeout, .. }) => {}
        other => panic!("expected a timeout abort, got {other:?}"),
    }
}

#[test]
fn speedup_report_ratios_and_shape() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(26, 3)).unwrap();
    let es = AssimilationConfig::uniform(2, 3);
    let out = baseline_run(&p, &es, &small_config(1), &space).unwrap();
    let policy = WetPolicy::default();
    let same = speedup_report(&out.ledger, &out.ledger, &policy).unwrap();
    assert_eq!(same.total.speedup, 1.0);
    assert!(same.rounds.iter().all(|r| r.speedup == 1.0));
    let mut slow = out.ledger.clone();
    slow.entries.iter_mut().for_each(|e| e.elapsed_s *= 2.0);
    let r = speedup_report(&out.ledger, &slow, &policy).unwrap();
    assert!((r.total.speedup - 2.0).abs() < 1e-12);
    assert_eq!(r.runs.len(), 2 * 3 * 3);
    assert_eq!(r.runs_csv().lines().count(), 1 + 18);
    assert_eq!(r.summary_csv().lines().count(), 1 + 3 + 1);
    assert_eq!(r.histogram_csv().lines().count(), 1 + 2 * HISTOGRAM_BINS);
    assert_eq!(r.tuned_bands.iter().sum::<u64>(), 9);
    let mut short = out.ledger.clone();
    short.entries.truncate(6);
    assert!(matches!(speedup_report(&out.ledger, &short, &policy), Err(WorkflowError::Shape(_))));
}

#[test]
fn campaign_rows_and_groups() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(27, 3)).unwrap();
    let cases: Vec<_> = p.prior_cases().into_iter().enumerate().map(|(j, c)| (format!("m{j}"), c)).collect();
    let out = run_campaign(&cases, &CampaignPlan::Lhs { n: 5, seed: 1 }, &space.defaults(), &space, 2, 2.0).unwrap();
    assert_eq!(out.raw.rows.len(), 3 * 5);
    assert_eq!(out.raw.groups(), vec!["m0", "m1", "m2"]);
    assert!(out.cleaned.rows.len() <= out.raw.rows.len());
    assert_eq!(out.raw.rows.len() - out.cleaned.rows.len(), out.discards.len());
    for g in out.raw.groups() {
        let f: Vec<_> = out.raw.rows.iter().filter(|r| r.group_id == g).map(|r| r.features.clone()).collect();
        assert!(f.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn ledger_json_round_trip() {
    let space = builtin_space();
    let p = generate_problem(&small_spec(28, 2)).unwrap();
    let out = baseline_run(&p, &AssimilationConfig::uniform(2, 1), &small_config(1), &space).unwrap();
    assert_eq!(RunLedger::from_json(&out.ledger.to_json()).unwrap(), out.ledger);
    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path(), &p, &AssimilationConfig::uniform(2, 1), &space).unwrap();
    for f in ["ledger.csv", "ledger.json", "run_manifest.json", "esmda/manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn partial_engineer_sample_keeps_defaults() {
    let space = builtin_space();
    let mut e = ConfigSample::default();
    e.set("lin_iter_max", ParamValue::Int(5));
    let cfg = WorkflowConfig { baseline: BaselineMode::Engineer, engineer: Some(e), ..small_config(1) };
    let s = cfg.baseline_sample(&space).unwrap();
    let mut want = space.defaults();
    want.set("lin_iter_max", ParamValue::Int(5));
    assert_eq!(s, want);
}
