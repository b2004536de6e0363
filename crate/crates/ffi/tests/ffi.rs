use std::ffi::CString;
use std::ptr;

use irtest_ffi::*;

fn ok(s: IrtStatus) {
    assert_eq!(s, IrtStatus::Ok);
}

#[test]
fn weights_and_density() {
    unsafe {
        let mut w = 0.0;
        ok(irt_weight_plain(false, 0.2, 0.5, &mut w));
        assert!((w - 5.0).abs() < 1e-12);
        ok(irt_weight_plain(true, 0.2, 0.5, &mut w));
        assert!((w - 1.0 / (0.2 + 0.8 / 0.5)).abs() < 1e-12);
        ok(irt_weight_rebalanced(true, true, 0.2, 0.1, 0.5, 0.475, &mut w));
        assert!((w - 0.4 / (1.8 * 0.1)).abs() < 1e-12);
        let mut q = 0.0;
        ok(irt_q_density(1.0, true, 0.2, 0.5, 0.5, &mut q));
        assert!((q - 1.8).abs() < 1e-12);
        assert_eq!(irt_q_density(1.0, true, 1.5, 0.5, 0.5, &mut q), IrtStatus::InvalidArgument);
    }
}

#[test]
fn metrics() {
    let scores = [0.9, 0.8, 0.3, 0.1];
    let labels = [1u8, 0, 1, 0];
    let mut ap = 0.0;
    unsafe {
        ok(irt_average_precision(scores.as_ptr(), labels.as_ptr(), 4, &mut ap));
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        let mut p = 0.0;
        ok(irt_precision_at_recall(scores.as_ptr(), labels.as_ptr(), 4, 0.5, &mut p));
        assert_eq!(p, 1.0);
        let none = [0u8; 4];
        assert_eq!(
            irt_average_precision(scores.as_ptr(), none.as_ptr(), 4, &mut ap),
            IrtStatus::Undefined
        );
        assert!(!irt_last_error().is_null());
    }
}

#[test]
fn simplex_qp() {
    // columns e1 and e2, target e2: optimum alpha = [0, 1]
    let a = [1.0, 0.0, 0.0, 1.0];
    let t = [0.0, 1.0];
    let mut alpha = [0.0; 2];
    let mut obj = f64::NAN;
    unsafe {
        ok(irt_solve_simplex_qp(a.as_ptr(), t.as_ptr(), 2, 2, 1e-12, ptr::null(), alpha.as_mut_ptr(), &mut obj));
    }
    assert!((alpha[1] - 1.0).abs() < 1e-12 && alpha[0].abs() < 1e-12);
    assert!(obj.abs() < 1e-20);
}

#[test]
fn model_lifecycle_and_sampling() {
    unsafe {
        let hidden = [8usize, 8];
        let mut m: *mut IrtModel = ptr::null_mut();
        ok(irt_model_init(2, hidden.as_ptr(), 2, 7, &mut m));
        let mut d = 0;
        ok(irt_model_input_dim(m, &mut d));
        assert_eq!(d, 2);

        let x = [0.1, 0.2, 0.7, 0.9];
        let mut y = [0.0; 2];
        ok(irt_model_predict(m, x.as_ptr(), 2, 2, y.as_mut_ptr()));
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(irt_model_predict(m, x.as_ptr(), 1, 4, y.as_mut_ptr()), IrtStatus::DimensionMismatch);

        let dir = tempfile::tempdir().unwrap();
        let file = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
        ok(irt_model_save(m, file.as_ptr()));
        let mut m2: *mut IrtModel = ptr::null_mut();
        ok(irt_model_load(file.as_ptr(), &mut m2));
        let mut y2 = [0.0; 2];
        ok(irt_model_predict(m2, x.as_ptr(), 2, 2, y2.as_mut_ptr()));
        assert_eq!(y, y2);

        let mut rng: *mut IrtRng = ptr::null_mut();
        ok(irt_rng_new(3, &mut rng));
        let (low, high) = ([0.0, 0.0], [1.0, 1.0]);
        let mut s = [f64::NAN; 2];
        let mut crit = false;
        for _ in 0..50 {
            ok(irt_sample_state(m, low.as_ptr(), high.as_ptr(), 2, 0.5, 0.5, 0.5, rng, s.as_mut_ptr(), &mut crit));
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        irt_rng_free(rng);
        irt_model_free(m);
        irt_model_free(m2);

        let missing = CString::new("/nonexistent/model.bin").unwrap();
        assert_eq!(irt_model_load(missing.as_ptr(), &mut m2), IrtStatus::Io);
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/irtest.h");
    for name in [
        "irt_last_error",
        "irt_rng_new",
        "irt_rng_free",
        "irt_model_init",
        "irt_model_load",
        "irt_model_save",
        "irt_model_free",
        "irt_model_input_dim",
        "irt_model_predict",
        "irt_weight_plain",
        "irt_weight_rebalanced",
        "irt_q_density",
        "irt_average_precision",
        "irt_precision_at_recall",
        "irt_solve_simplex_qp",
        "irt_sample_state",
        "IRT_STATUS_OK",
        "typedef struct IrtModel IrtModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
