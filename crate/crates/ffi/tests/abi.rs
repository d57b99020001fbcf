use std::ffi::{CStr, CString};
use std::ptr;

use dde::predictor::Architecture;
use dde::{Checkpoint, NoisePredictor};
use dde_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dde_last_error()) }.to_string_lossy().into_owned()
}

fn schedule(steps: usize) -> *mut DdeSchedule {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { dde_schedule_new_linear(steps, 1e-4, 0.02, &mut s) }, DdeStatus::Ok);
    s
}

fn small_net(steps: usize) -> NoisePredictor {
    let arch = Architecture { input_dim: 2, hidden: 8, depth: 2, n_classes: 3, n_freqs: 3, steps };
    let n = arch.layout().len;
    let params = (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * 0.4).collect();
    NoisePredictor::from_params(arch, params).unwrap()
}

fn c_path(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(dde_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn schedule_queries() {
    let s = schedule(100);
    unsafe {
        assert_eq!(dde_schedule_steps(s), 100);
        let mut a0 = 0.0;
        assert_eq!(dde_schedule_alpha_bar(s, 0, &mut a0), DdeStatus::Ok);
        assert_eq!(a0, 1.0);
        let (mut a, mut c) = (0.0, 0.0);
        assert_eq!(dde_schedule_alpha_bar(s, 40, &mut a), DdeStatus::Ok);
        assert_eq!(dde_schedule_single_shot_coefficient(s, 40, &mut c), DdeStatus::Ok);
        assert!((c - ((1.0 - a) / a).sqrt()).abs() < 1e-12);

        assert_eq!(dde_schedule_alpha_bar(s, 101, &mut a), DdeStatus::OutOfRange);
        assert!(last_error().contains("101"), "{}", last_error());
        assert_eq!(dde_schedule_single_shot_coefficient(s, 0, &mut c), DdeStatus::OutOfRange);
        dde_schedule_free(s);
    }
}

#[test]
fn bad_arguments_are_reported() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(dde_schedule_new_linear(10, 0.5, 0.1, &mut s), DdeStatus::InvalidArgument);
        assert!(s.is_null());
        assert!(!last_error().is_empty());

        let mut v = 0.0;
        assert_eq!(dde_schedule_alpha_bar(ptr::null(), 1, &mut v), DdeStatus::NullPointer);
        assert!(last_error().contains("schedule"));
        let good = schedule(10);
        assert_eq!(dde_schedule_alpha_bar(good, 1, ptr::null_mut()), DdeStatus::NullPointer);
        assert_eq!(dde_schedule_steps(ptr::null()), 0);

        let mut p = ptr::null_mut();
        assert_eq!(dde_predictor_load(ptr::null(), &mut p), DdeStatus::NullPointer);
        let missing = c_path(std::path::Path::new("/nonexistent/dir/x.ckpt"));
        assert_eq!(dde_predictor_load(missing.as_ptr(), &mut p), DdeStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert_eq!(dde_predictor_load(c_path(&junk).as_ptr(), &mut p), DdeStatus::Format);

        dde_schedule_free(good);
        dde_schedule_free(ptr::null_mut());
        dde_predictor_free(ptr::null_mut());
        dde_table_free(ptr::null_mut());
    }
}

#[test]
fn table_updates_and_correction() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(dde_table_new(6, 0.5, &mut t), DdeStatus::Ok);
        let mut delta = 0.0;
        assert_eq!(dde_table_ema_update(t, DdeRole::TargetWinner, 3, -2.0, &mut delta), DdeStatus::Ok);
        assert_eq!(delta, -1.0);
        assert_eq!(dde_table_ema_update(t, DdeRole::ReferenceLoser, 4, -4.0, ptr::null_mut()), DdeStatus::Ok);
        let mut v = 0.0;
        assert_eq!(dde_table_get(t, DdeRole::TargetWinner, 3, &mut v), DdeStatus::Ok);
        assert_eq!(v, -1.0);

        // combined term is r_tw - r_rw - r_tl + r_rl
        let mut c = 0.0;
        assert_eq!(dde_table_correction_term(t, 1, &mut c), DdeStatus::Ok);
        assert_eq!(c, -1.0 + -2.0);
        assert_eq!(dde_table_correction_term(t, 4, &mut c), DdeStatus::Ok);
        assert_eq!(c, -2.0);
        assert_eq!(dde_table_correction_term(t, 0, &mut c), DdeStatus::OutOfRange);
        assert_eq!(dde_table_ema_update(t, DdeRole::TargetLoser, 6, 0.0, &mut delta), DdeStatus::OutOfRange);

        let mut bad = ptr::null_mut();
        assert_eq!(dde_table_new(6, 0.0, &mut bad), DdeStatus::InvalidArgument);
        dde_table_free(t);
    }
}

#[test]
fn calibration_observation_closed_form() {
    let s = schedule(50);
    let q = [0.5, -0.25];
    let m = [0.1, 0.05];
    unsafe {
        let mut v = 0.0;
        assert_eq!(dde_calibration_observation(s, q.as_ptr(), m.as_ptr(), 2, 10, &mut v), DdeStatus::Ok);
        let rs = dde::Schedule::linear(50, 1e-4, 0.02).unwrap();
        let d2 = (0.4f64).powi(2) + (0.3f64).powi(2);
        assert!((v - (-d2 / (2.0 * rs.posterior_var(10)))).abs() < 1e-9 * v.abs());
        assert_eq!(dde_calibration_observation(s, q.as_ptr(), m.as_ptr(), 2, 1, &mut v), DdeStatus::ZeroVariance);
        dde_schedule_free(s);
    }
}

#[test]
fn predictor_round_trip_and_loss() {
    let net = small_net(50);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Checkpoint::model_only(net.clone()).save(&path).unwrap();
    let s = schedule(50);
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(dde_predictor_load(c_path(&path).as_ptr(), &mut p), DdeStatus::Ok);
        assert_eq!(dde_predictor_input_dim(p), 2);
        assert_eq!(dde_predictor_num_params(p), net.num_params());

        let x = [0.3, -0.7];
        let mut eps = [0.0; 2];
        assert_eq!(dde_predictor_predict(p, x.as_ptr(), 2, 17, 1, eps.as_mut_ptr()), DdeStatus::Ok);
        assert_eq!(eps.to_vec(), net.predict(&x, 17, 1).unwrap());
        assert_eq!(dde_predictor_predict(p, x.as_ptr(), 1, 17, 1, eps.as_mut_ptr()), DdeStatus::DimensionMismatch);
        assert_eq!(dde_predictor_predict(p, x.as_ptr(), 2, 17, 3, eps.as_mut_ptr()), DdeStatus::OutOfRange);

        let copy = dir.path().join("copy.ckpt");
        assert_eq!(dde_predictor_save(p, c_path(&copy).as_ptr()), DdeStatus::Ok);
        assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());

        let mut table = ptr::null_mut();
        assert_eq!(dde_table_new(50, 0.1, &mut table), DdeStatus::Ok);
        let (xw, xl, nw, nl) = ([1.0, 0.5], [-0.5, 0.2], [0.3, -1.1], [0.8, 0.4]);
        let pair = DdePairInput {
            class_index: 2,
            x0_winner: xw.as_ptr(),
            x0_loser: xl.as_ptr(),
            noise_winner: nw.as_ptr(),
            noise_loser: nl.as_ptr(),
            dim: 2,
            t: 30,
        };
        // target equal to reference with an empty table sits at the fixed point
        let mut out = DdeLossOutput::default();
        let mut grad = vec![0.0; net.num_params()];
        let st = dde_pair_loss(s, p, p, table, DdeMethod::Dde, 5.0, &pair, &mut out, grad.as_mut_ptr(), grad.len());
        assert_eq!(st, DdeStatus::Ok, "{}", last_error());
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.logit, 0.0);
        assert_eq!(out.mse_target_winner, out.mse_reference_winner);
        assert!(grad.iter().any(|g| *g != 0.0));

        let st = dde_pair_loss(s, p, p, table, DdeMethod::Sft, 5.0, &pair, &mut out, ptr::null_mut(), 0);
        assert_eq!(st, DdeStatus::Ok);
        assert!(out.loss > 0.0);

        let st = dde_pair_loss(s, p, p, table, DdeMethod::Dde, 5.0, &pair, &mut out, grad.as_mut_ptr(), 3);
        assert_eq!(st, DdeStatus::DimensionMismatch);

        dde_table_free(table);
        dde_predictor_free(p);
        dde_schedule_free(s);
    }
}
