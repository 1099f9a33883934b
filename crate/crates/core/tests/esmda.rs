use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use simtune::esmda::*;

fn scalar_obs(d: f64, var: f64) -> ObservationSet {
    ObservationSet { d_obs: vec![d], variances: vec![var], labels: vec!["d".into()] }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

#[test]
fn two_member_scalar_update_by_hand() {
    let m = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
    let d = m.clone();
    let (c_md, c_dd) = cross_covariance(&m, &d).unwrap();
    assert_eq!(c_md[(0, 0)], 2.0);
    assert_eq!(c_dd[(0, 0)], 2.0);
    let k = kalman_gain(&c_md, &c_dd, &[1.0], 1.0, DEFAULT_SVD_TOL).unwrap();
    assert!((k[(0, 0)] - 2.0 / 3.0).abs() <= f64::EPSILON);
    let d_uc = DMatrix::from_row_slice(1, 2, &[3.0, 3.0]);
    let next = update_ensemble(&m, &d, &d_uc, &k).unwrap();
    assert!((next[(0, 0)] - 2.0).abs() <= 4.0 * f64::EPSILON);
    assert!((next[(0, 1)] - 8.0 / 3.0).abs() <= 4.0 * f64::EPSILON);
}

#[test]
fn constant_parameters_give_zero_gain_and_no_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = DMatrix::from_element(3, 10, 1.5);
    let d = normal_matrix(4, 10, &mut rng);
    let (c_md, c_dd) = cross_covariance(&m, &d).unwrap();
    assert!(c_md.iter().all(|v| *v == 0.0));
    let k = kalman_gain(&c_md, &c_dd, &[1.0; 4], 2.0, DEFAULT_SVD_TOL).unwrap();
    assert!(k.iter().all(|v| *v == 0.0));
    let d_uc = normal_matrix(4, 10, &mut rng);
    assert_eq!(update_ensemble(&m, &d, &d_uc, &k).unwrap(), m);
    let m2 = normal_matrix(3, 10, &mut rng);
    let k2 = normal_matrix(3, 4, &mut rng);
    assert_eq!(update_ensemble(&m2, &d, &d, &k2).unwrap(), m2);
}

#[test]
fn data_covariance_is_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let m = normal_matrix(5, 8, &mut rng);
        let d = normal_matrix(6, 8, &mut rng);
        let (_, c_dd) = cross_covariance(&m, &d).unwrap();
        assert!((&c_dd - c_dd.transpose()).abs().max() < 1e-14);
        let eig = c_dd.symmetric_eigenvalues();
        assert!(eig.iter().all(|e| *e > -1e-12));
    }
    assert!(matches!(
        cross_covariance(&DMatrix::zeros(2, 1), &DMatrix::zeros(3, 1)),
        Err(EsmdaError::TooFewMembers(1))
    ));
}

#[test]
fn truncated_pinv_gain_equals_direct_inverse_when_well_conditioned() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let m = normal_matrix(4, 40, &mut rng);
        let d = normal_matrix(6, 40, &mut rng);
        let (c_md, c_dd) = cross_covariance(&m, &d).unwrap();
        let c_d = [0.5, 1.0, 2.0, 0.1, 0.3, 1.5];
        let k = kalman_gain(&c_md, &c_dd, &c_d, 3.0, DEFAULT_SVD_TOL).unwrap();
        let s = &c_dd + DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(6, c_d.iter().map(|v| 3.0 * v)));
        let cond = {
            let sv = s.clone().singular_values();
            sv.max() / sv.min()
        };
        assert!(cond < 1e6);
        let direct = &c_md * s.try_inverse().unwrap();
        assert!((&k - &direct).abs().max() <= 1e-10);
    }
}

#[test]
fn gain_rejects_non_finite_input() {
    let c = DMatrix::from_element(1, 1, f64::NAN);
    assert!(matches!(
        kalman_gain(&c, &DMatrix::from_element(1, 1, 1.0), &[1.0], 1.0, 1e-8),
        Err(EsmdaError::NonFinite(_))
    ));
}

#[test]
fn perturbation_properties() {
    let obs = ObservationSet { d_obs: vec![1.0, -2.0], variances: vec![1e-300, 1e-300], labels: vec!["a".into(), "b".into()] };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = perturb_observations(&obs, 4.0, 10, &mut rng);
    for j in 0..10 {
        assert!((p[(0, j)] - 1.0).abs() < 1e-140 && (p[(1, j)] + 2.0).abs() < 1e-140);
    }
    let obs = ObservationSet { d_obs: vec![1.0, -2.0], variances: vec![0.5, 3.0], labels: vec!["a".into(), "b".into()] };
    let n = 100_000;
    let alpha = 4.0;
    let p = perturb_observations(&obs, alpha, n, &mut ChaCha8Rng::seed_from_u64(5));
    let mean = p.column_mean();
    for i in 0..2 {
        let bound = 3.0 * (alpha * obs.variances[i] / n as f64).sqrt();
        assert!((mean[i] - obs.d_obs[i]).abs() <= bound, "component {i}");
    }
    let again = perturb_observations(&obs, alpha, n, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(p, again);
}

fn identity_forward(_: &ForwardContext, m: &DMatrix<f64>) -> Result<DMatrix<f64>, MemberFailure> {
    Ok(m.clone())
}

#[test]
fn linear_gaussian_posterior_matches_closed_form() {
    // prior N(0,1), d = m, noise N(0,1): posterior N(d/2, 1/2). The bounds
    // come from the sampling spread of mean and variance over n members.
    let (d_obs, n, seeds) = (2.0, 2000, 20u64);
    let sd_mean = (0.5 / n as f64).sqrt();
    let sd_var = 0.5 * (2.0 / (n - 1) as f64).sqrt();
    let (mut sum_mean, mut sum_var) = (0.0, 0.0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m0 = normal_matrix(1, n, &mut rng);
        let init = EnsembleState::new(m0, vec!["m".into()]).unwrap();
        let cfg = AssimilationConfig { alphas: vec![4.0; 4], seed, svd_tol: DEFAULT_SVD_TOL };
        let (fin, ledger) = run_esmda(init, &scalar_obs(d_obs, 1.0), &cfg, identity_forward).unwrap();
        let v: Vec<f64> = fin.m.iter().copied().collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() <= 4.0 * sd_mean, "seed {seed}: mean {mean}");
        assert!((var - 0.5).abs() <= 4.0 * sd_var, "seed {seed}: var {var}");
        assert_eq!(ledger.forward_calls, 5);
        assert_eq!(ledger.rounds.len(), 4);
        sum_mean += mean;
        sum_var += var;
    }
    let k = seeds as f64;
    assert!((sum_mean / k - 1.0).abs() <= 3.0 * sd_mean / k.sqrt());
    assert!((sum_var / k - 0.5).abs() <= 3.0 * sd_var / k.sqrt());
}

#[test]
fn single_round_is_one_smoother_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m0 = normal_matrix(2, 30, &mut rng);
    let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.3, 0.3]);
    let obs = ObservationSet { d_obs: vec![0.2, 1.0, -0.4], variances: vec![0.1, 0.2, 0.3], labels: vec!["a".into(), "b".into(), "c".into()] };
    let cfg = AssimilationConfig { alphas: vec![1.0], seed: 17, svd_tol: DEFAULT_SVD_TOL };
    let init = EnsembleState::new(m0.clone(), vec!["p".into(), "q".into()]).unwrap();
    let (fin, _) = run_esmda(init, &obs, &cfg, |_, m| Ok(&g * m)).unwrap();
    let d = &g * &m0;
    let d_uc = perturb_observations(&obs, 1.0, 30, &mut perturbation_rng(17, 1));
    let (c_md, c_dd) = cross_covariance(&m0, &d).unwrap();
    let k = kalman_gain(&c_md, &c_dd, &obs.variances, 1.0, DEFAULT_SVD_TOL).unwrap();
    assert_eq!(fin.m, update_ensemble(&m0, &d, &d_uc, &k).unwrap());
}

#[test]
fn uninformative_data_leaves_ensemble_mean_in_place() {
    // simulated data independent of the parameters: the gain is pure sampling noise
    let n = 1000;
    let mut shifts = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m0 = normal_matrix(1, n, &mut rng);
        let before = m0.mean();
        let init = EnsembleState::new(m0, vec!["m".into()]).unwrap();
        let cfg = AssimilationConfig::uniform(4, seed);
        let mut noise = ChaCha8Rng::seed_from_u64(seed + 100);
        let (fin, _) = run_esmda(init, &scalar_obs(1.0, 1.0), &cfg, |_, m| Ok(normal_matrix(1, m.ncols(), &mut noise)))
            .unwrap();
        shifts.push(fin.m.mean() - before);
    }
    // per round the gain is about C_MD / (alpha + 1) with C_MD ~ N(0, 1/n), so
    // four rounds move the mean by roughly N(0, (0.4)^2 / n)
    let sd = 0.4 / (n as f64).sqrt();
    for s in &shifts {
        assert!(s.abs() <= 5.0 * sd, "shift {s} vs sd {sd}");
    }
    let mean_shift = shifts.iter().sum::<f64>() / shifts.len() as f64;
    assert!(mean_shift.abs() <= 3.0 * sd / (shifts.len() as f64).sqrt() * 2.0);
}

#[test]
fn update_commutes_with_member_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = normal_matrix(3, 12, &mut rng);
    let d = normal_matrix(4, 12, &mut rng);
    let d_uc = normal_matrix(4, 12, &mut rng);
    let perm: Vec<usize> = (0..12).map(|j| (j * 5 + 3) % 12).collect();
    let permute = |x: &DMatrix<f64>| DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, perm[j])]);
    let step = |m: &DMatrix<f64>, d: &DMatrix<f64>, du: &DMatrix<f64>| {
        let (a, b) = cross_covariance(m, d).unwrap();
        let k = kalman_gain(&a, &b, &[1.0; 4], 2.0, DEFAULT_SVD_TOL).unwrap();
        update_ensemble(m, d, du, &k).unwrap()
    };
    let direct = permute(&step(&m, &d, &d_uc));
    let permuted = step(&permute(&m), &permute(&d), &permute(&d_uc));
    assert!((direct - permuted).abs().max() < 1e-12);
}

#[test]
fn forward_failure_names_member_and_bad_alphas_stop_early() {
    let m0 = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]);
    let init = EnsembleState::new(m0, vec!["m".into()]).unwrap();
    let mut calls = 0;
    let err = run_esmda(init.clone(), &scalar_obs(1.0, 1.0), &AssimilationConfig::uniform(2, 0), |ctx, m| {
        calls += 1;
        if ctx.round == 2 {
            Err(MemberFailure { member: 1, message: "TIMEOUT".into() })
        } else {
            Ok(m.clone())
        }
    })
    .unwrap_err();
    assert_eq!(err, EsmdaError::Forward { round: 2, member: 1, message: "TIMEOUT".into() });
    assert_eq!(calls, 2);
    let bad = AssimilationConfig { alphas: vec![3.0, 3.0], seed: 0, svd_tol: 1e-8 };
    let mut called = false;
    let r = run_esmda(init, &scalar_obs(1.0, 1.0), &bad, |_, m| {
        called = true;
        Ok(m.clone())
    });
    assert!(matches!(r, Err(EsmdaError::Alphas(_))));
    assert!(!called);
}

#[test]
fn ledger_written_with_manifest() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let init = EnsembleState::new(normal_matrix(2, 5, &mut rng), vec!["a".into(), "b".into()]).unwrap();
    let obs = ObservationSet { d_obs: vec![0.0], variances: vec![1.0], labels: vec!["y".into()] };
    let cfg = AssimilationConfig::uniform(3, 9);
    let (_, ledger) = run_esmda(init, &obs, &cfg, |_, m| Ok(m.rows(0, 1).into_owned())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = ledger.save(dir.path(), &cfg, &["a".into(), "b".into()], &obs).unwrap();
    assert_eq!(manifest.files.len(), 8);
    assert_eq!(manifest.n_members, 5);
    let text = std::fs::read_to_string(dir.path().join("round_1_m.csv")).unwrap();
    assert!(text.starts_with("name,member_0,"));
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("manifest.json").exists());
}
