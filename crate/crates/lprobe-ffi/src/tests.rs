//! Exercises the C ABI through the extern functions exactly as a C caller
//! would: raw pointers in, status codes out, explicit frees.

use super::*;

fn last_error() -> String {
    unsafe {
        let needed = lp_last_error_message(std::ptr::null_mut(), 0);
        let mut buf = vec![0u8; needed + 1];
        let full = lp_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len());
        assert_eq!(full, needed);
        buf.truncate(needed);
        String::from_utf8(buf).expect("error message is UTF-8")
    }
}

/// Frees the suite on drop so failed assertions don't leak handles.
struct SuiteHandle(*mut LpSuite);

impl Drop for SuiteHandle {
    fn drop(&mut self) {
        unsafe { lp_suite_free(self.0) }
    }
}

struct ModelHandle(*mut LpModel);

impl Drop for ModelHandle {
    fn drop(&mut self) {
        unsafe { lp_model_free(self.0) }
    }
}

fn small_suite() -> SuiteHandle {
    let mut out: *mut LpSuite = std::ptr::null_mut();
    let status = unsafe { lp_suite_generate(3, 5, 120, 60, 60, 7, 8, &mut out) };
    assert_eq!(status, LpStatus::Ok, "{}", last_error());
    assert!(!out.is_null());
    SuiteHandle(out)
}

fn quick_train(suite: &SuiteHandle) -> (ModelHandle, f64) {
    let mut cfg = LpTrainConfig {
        objective: 0,
        epochs: 0,
        batch_size: 0,
        learning_rate: 0.0,
        weight_decay: 0.0,
        seed: 0,
        sam_rho: 0.0,
        fisher_lambda: 0.0,
        consistency_lambda: 0.0,
        view_noise_sigma: 0.0,
    };
    let status = unsafe { lp_train_config_default(LpObjective::Baseline as u32, &mut cfg) };
    assert_eq!(status, LpStatus::Ok);
    cfg.epochs = 2;
    cfg.seed = 5;

    let hidden = [8usize];
    let mut best = f64::NAN;
    let mut model: *mut LpModel = std::ptr::null_mut();
    let status = unsafe {
        lp_model_train(
            suite.0,
            &cfg,
            hidden.as_ptr(),
            hidden.len(),
            42,
            &mut best,
            &mut model,
        )
    };
    assert_eq!(status, LpStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    (ModelHandle(model), best)
}

fn test_measure_configs() -> (LpSharpnessConfig, LpAlphaConfig) {
    let mut sharp = LpSharpnessConfig {
        noise_scale: 0.0,
        ascent_coeff: 0.0,
        radius_lambda: 0.0,
        batch_size: 0,
        seed: 0,
    };
    let mut alpha = LpAlphaConfig {
        loss_target_offset: 0.0,
        ascent_steps: 0,
        binary_search_iters: 0,
        alpha_lo: 0.0,
        alpha_hi: 0.0,
        seed: 0,
    };
    unsafe {
        assert_eq!(lp_sharpness_config_default(90, &mut sharp), LpStatus::Ok);
        assert_eq!(lp_alpha_config_default(90, &mut alpha), LpStatus::Ok);
    }
    // Keep the search cheap; the values still exercise the full path.
    alpha.binary_search_iters = 10;
    alpha.ascent_steps = 5;
    (sharp, alpha)
}

#[test]
fn suite_getters_and_domain_names() {
    let suite = small_suite();
    let (mut dim, mut classes, mut domains) = (0usize, 0usize, 0usize);
    unsafe {
        assert_eq!(lp_suite_input_dim(suite.0, &mut dim), LpStatus::Ok);
        assert_eq!(lp_suite_num_classes(suite.0, &mut classes), LpStatus::Ok);
        assert_eq!(lp_suite_num_domains(suite.0, &mut domains), LpStatus::Ok);
    }
    assert_eq!((dim, classes, domains), (5, 3, 14));

    let mut buf = [0i8 as c_char; 32];
    let status = unsafe { lp_suite_domain_name(suite.0, 0, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(status, LpStatus::Ok);
    let name = unsafe { CStr::from_ptr(buf.as_ptr()) };
    assert_eq!(name.to_str().unwrap(), "shift01");

    let status = unsafe { lp_suite_domain_name(suite.0, 0, buf.as_mut_ptr(), 3) };
    assert_eq!(status, LpStatus::BufferTooSmall);
    assert!(last_error().contains("need"), "got: {}", last_error());

    let status = unsafe { lp_suite_domain_name(suite.0, 99, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(status, LpStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
}

#[test]
fn train_measure_and_checkpoint_roundtrip() {
    let suite = small_suite();
    let (model, best) = quick_train(&suite);
    assert!((0.0..=1.0).contains(&best));

    let (sharp, alpha) = test_measure_configs();
    let (mut acc, mut margin, mut phi) = (f64::NAN, f64::NAN, f64::NAN);
    unsafe {
        assert_eq!(
            lp_model_domain_accuracy(model.0, suite.0, 0, &mut acc),
            LpStatus::Ok
        );
        assert_eq!(
            lp_model_domain_margin(model.0, suite.0, 0, &mut margin),
            LpStatus::Ok
        );
        assert_eq!(
            lp_model_phi_difference(model.0, suite.0, 0, &sharp, &mut phi),
            LpStatus::Ok
        );
    }
    assert!((0.0..=1.0).contains(&acc));
    assert!(margin.is_finite());
    assert!(phi.is_finite());

    let (mut aphi, mut aval, mut failed) = (f64::NAN, f64::NAN, true);
    let status = unsafe {
        lp_model_phi_alpha(model.0, suite.0, &sharp, &alpha, &mut aphi, &mut aval, &mut failed)
    };
    assert_eq!(status, LpStatus::Ok, "{}", last_error());
    if !failed {
        assert!(aphi >= 0.0 && aval > 0.0);
    }

    let mut frob = f64::NAN;
    unsafe {
        assert_eq!(
            lp_model_frobenius_distance(model.0, &mut frob),
            LpStatus::Ok
        );
    }
    assert!(frob > 0.0);

    // Checkpoint roundtrip preserves the measured values exactly.
    let dir = tempfile::tempdir().expect("tempdir");
    let path = CString::new(
        dir.path()
            .join("model.lpm")
            .to_str()
            .expect("utf8 path")
            .to_string(),
    )
    .unwrap();
    let mut reloaded: *mut LpModel = std::ptr::null_mut();
    unsafe {
        assert_eq!(lp_model_save(model.0, path.as_ptr()), LpStatus::Ok);
        assert_eq!(lp_model_load(path.as_ptr(), &mut reloaded), LpStatus::Ok);
    }
    let reloaded = ModelHandle(reloaded);
    let (mut count_a, mut count_b) = (0usize, 0usize);
    let (mut acc_b, mut frob_b) = (f64::NAN, f64::NAN);
    unsafe {
        assert_eq!(lp_model_param_count(model.0, &mut count_a), LpStatus::Ok);
        assert_eq!(
            lp_model_param_count(reloaded.0, &mut count_b),
            LpStatus::Ok
        );
        assert_eq!(
            lp_model_domain_accuracy(reloaded.0, suite.0, 0, &mut acc_b),
            LpStatus::Ok
        );
        assert_eq!(
            lp_model_frobenius_distance(reloaded.0, &mut frob_b),
            LpStatus::Ok
        );
    }
    assert_eq!(count_a, count_b);
    assert_eq!(acc, acc_b);
    assert_eq!(frob.to_bits(), frob_b.to_bits());
}

#[test]
fn measure_csv_matches_scalar_functions() {
    let suite = small_suite();
    let (model, _) = quick_train(&suite);
    let (sharp, alpha) = test_measure_configs();

    let model_id = CString::new("ffi-model").unwrap();
    let objective = CString::new("baseline").unwrap();
    let mut csv_ptr: *mut c_char = std::ptr::null_mut();
    let status = unsafe {
        lp_measure_csv(
            model.0,
            suite.0,
            model_id.as_ptr(),
            objective.as_ptr(),
            5,
            &sharp,
            &alpha,
            false,
            &mut csv_ptr,
        )
    };
    assert_eq!(status, LpStatus::Ok, "{}", last_error());
    let csv = unsafe { CStr::from_ptr(csv_ptr) }
        .to_str()
        .unwrap()
        .to_string();
    unsafe { lp_string_free(csv_ptr) };

    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 15, "header plus one row per shifted domain");
    assert!(lines[0].starts_with("model_id,objective,seed,domain,accuracy"));

    // The scalar entry points reproduce the CSV columns bit for bit.
    let mut phi = f64::NAN;
    unsafe {
        assert_eq!(
            lp_model_phi_difference(model.0, suite.0, 0, &sharp, &mut phi),
            LpStatus::Ok
        );
    }
    let first_row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first_row[3], "shift01");
    assert_eq!(first_row[6], format!("{phi:.16e}"));
}

#[test]
fn suite_save_load_roundtrip() {
    let suite = small_suite();
    let dir = tempfile::tempdir().expect("tempdir");
    let path = CString::new(dir.path().to_str().expect("utf8 path").to_string()).unwrap();
    let mut reloaded: *mut LpSuite = std::ptr::null_mut();
    unsafe {
        assert_eq!(lp_suite_save(suite.0, path.as_ptr()), LpStatus::Ok);
        assert_eq!(lp_suite_load(path.as_ptr(), &mut reloaded), LpStatus::Ok);
    }
    let reloaded = SuiteHandle(reloaded);
    let (mut dim, mut classes, mut domains) = (0usize, 0usize, 0usize);
    unsafe {
        assert_eq!(lp_suite_input_dim(reloaded.0, &mut dim), LpStatus::Ok);
        assert_eq!(lp_suite_num_classes(reloaded.0, &mut classes), LpStatus::Ok);
        assert_eq!(lp_suite_num_domains(reloaded.0, &mut domains), LpStatus::Ok);
    }
    assert_eq!((dim, classes, domains), (5, 3, 14));
}

#[test]
fn config_defaults_match_core() {
    let mut cfg = LpTrainConfig {
        objective: 0,
        epochs: 0,
        batch_size: 0,
        learning_rate: 0.0,
        weight_decay: 0.0,
        seed: 0,
        sam_rho: 0.0,
        fisher_lambda: 0.0,
        consistency_lambda: 0.0,
        view_noise_sigma: 0.0,
    };
    unsafe {
        assert_eq!(
            lp_train_config_default(LpObjective::Sam as u32, &mut cfg),
            LpStatus::Ok
        );
    }
    let core = TrainConfig::defaults(Objective::Sam, 0);
    assert_eq!(cfg.objective, 1);
    assert_eq!(cfg.epochs, core.epochs);
    assert_eq!(cfg.batch_size, core.batch_size);
    assert_eq!(cfg.learning_rate, core.learning_rate);
    assert_eq!(cfg.weight_decay, core.weight_decay);
    assert_eq!(cfg.sam_rho, core.sam_rho);
    assert_eq!(cfg.fisher_lambda, core.fisher_lambda);
    assert_eq!(cfg.consistency_lambda, core.consistency_lambda);
    assert_eq!(cfg.view_noise_sigma, core.view_noise_sigma);

    let mut sharp = LpSharpnessConfig {
        noise_scale: 0.0,
        ascent_coeff: 0.0,
        radius_lambda: 0.0,
        batch_size: 0,
        seed: 0,
    };
    unsafe {
        assert_eq!(lp_sharpness_config_default(3, &mut sharp), LpStatus::Ok);
    }
    let core = SharpnessConfig::defaults(3);
    assert_eq!(sharp.noise_scale, core.noise_scale);
    assert_eq!(sharp.ascent_coeff, core.ascent_coeff);
    assert_eq!(sharp.radius_lambda, core.radius_lambda);
    assert_eq!(sharp.batch_size, core.batch_size);
    assert_eq!(sharp.seed, 3);

    let mut alpha = LpAlphaConfig {
        loss_target_offset: 0.0,
        ascent_steps: 0,
        binary_search_iters: 0,
        alpha_lo: 0.0,
        alpha_hi: 0.0,
        seed: 0,
    };
    unsafe {
        assert_eq!(lp_alpha_config_default(3, &mut alpha), LpStatus::Ok);
    }
    let core = AlphaSharpnessConfig::defaults(3);
    assert_eq!(alpha.loss_target_offset, core.loss_target_offset);
    assert_eq!(alpha.ascent_steps, core.ascent_steps);
    assert_eq!(alpha.binary_search_iters, core.binary_search_iters);
    assert_eq!(alpha.alpha_lo, core.alpha_lo);
    assert_eq!(alpha.alpha_hi, core.alpha_hi);

    assert_eq!(lp_default_measure_seed(), DEFAULT_MEASURE_SEED);
}

#[test]
fn error_paths_set_status_and_message() {
    let mut out: *mut LpSuite = std::ptr::null_mut();

    let status = unsafe { lp_suite_load(std::ptr::null(), &mut out) };
    assert_eq!(status, LpStatus::NullPointer);
    assert_eq!(last_error(), "dir is null");

    let bad_utf8 = CString::new(vec![0xffu8, 0xfe]).unwrap();
    let status = unsafe { lp_suite_load(bad_utf8.as_ptr(), &mut out) };
    assert_eq!(status, LpStatus::InvalidUtf8);
    assert!(last_error().contains("UTF-8"));

    let missing = CString::new("/nonexistent/suite-dir").unwrap();
    let status = unsafe { lp_suite_load(missing.as_ptr(), &mut out) };
    assert_eq!(status, LpStatus::DataError);
    assert!(!last_error().is_empty());

    let mut model_out: *mut LpModel = std::ptr::null_mut();
    let missing = CString::new("/nonexistent/model.lpm").unwrap();
    let status = unsafe { lp_model_load(missing.as_ptr(), &mut model_out) };
    assert_eq!(status, LpStatus::ModelError);

    let mut cfg = LpTrainConfig {
        objective: 9,
        epochs: 1,
        batch_size: 1,
        learning_rate: 0.1,
        weight_decay: 0.0,
        seed: 0,
        sam_rho: 0.1,
        fisher_lambda: 0.1,
        consistency_lambda: 0.1,
        view_noise_sigma: 0.1,
    };
    let status = unsafe { lp_train_config_default(9, &mut cfg) };
    assert_eq!(status, LpStatus::InvalidArgument);
    assert!(last_error().contains("objective code 9"));

    let suite = small_suite();
    let mut model: *mut LpModel = std::ptr::null_mut();
    let status = unsafe {
        lp_model_train(
            suite.0,
            &cfg,
            std::ptr::null(),
            0,
            1,
            std::ptr::null_mut(),
            &mut model,
        )
    };
    assert_eq!(status, LpStatus::InvalidArgument, "bad objective in config");

    let status = unsafe {
        lp_model_train(
            std::ptr::null(),
            &cfg,
            std::ptr::null(),
            0,
            1,
            std::ptr::null_mut(),
            &mut model,
        )
    };
    assert_eq!(status, LpStatus::NullPointer);

    // Free of null handles is a no-op, not a crash.
    unsafe {
        lp_suite_free(std::ptr::null_mut());
        lp_model_free(std::ptr::null_mut());
        lp_string_free(std::ptr::null_mut());
    }
}

#[test]
fn last_error_reports_length_and_truncates() {
    let mut out: *mut LpSuite = std::ptr::null_mut();
    let status = unsafe { lp_suite_load(std::ptr::null(), &mut out) };
    assert_eq!(status, LpStatus::NullPointer);

    let needed = unsafe { lp_last_error_message(std::ptr::null_mut(), 0) };
    assert_eq!(needed, "dir is null".len());

    let mut buf = [0 as c_char; 5];
    let full = unsafe { lp_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(full, needed);
    let copied = unsafe { CStr::from_ptr(buf.as_ptr()) };
    assert_eq!(copied.to_str().unwrap(), "dir ");
}

#[test]
fn generated_header_covers_the_surface() {
    let header = include_str!("../include/lprobe.h");
    for needle in [
        "LpStatus",
        "LpSuite",
        "LpModel",
        "LpTrainConfig",
        "lp_model_train",
        "lp_model_phi_alpha",
        "lp_measure_csv",
        "lp_last_error_message",
    ] {
        assert!(header.contains(needle), "header is missing {needle}");
    }
}
